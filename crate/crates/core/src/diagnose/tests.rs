use super::*;
use crate::corpus::tests::{bx, header, one_hot, region, three_phrase_example};
use crate::geometry::{iot, BoundingBox};
use crate::model::{Architecture, ConstantPredictor};
use crate::testutil::small_shape;
use proptest::prelude::*;

fn three_phrase_corpus() -> Corpus {
    let (h, ex) = three_phrase_example();
    Corpus::new(h, vec![ex]).unwrap()
}

fn config_for(c: &Corpus) -> ModelConfig {
    small_shape(Architecture::SingleStream).for_corpus(c.header()).unwrap()
}

fn wrap() -> Wrap {
    Wrap::of(&three_phrase_corpus()).unwrap()
}

#[test]
fn uniform_predictor_scores_log_of_support() {
    let c = three_phrase_corpus();
    let m = ConstantPredictor::uniform(config_for(&c));
    let v = c.header().vocab_size as f64;
    let r = evaluate_v4l(&m, &c, &V4LSetup::standard()).unwrap();
    assert_eq!(r.len(), 9);
    for rec in &r.records {
        assert!((rec.loss_bits - 2.0 * v.log2()).abs() < 1e-12);
    }
    let r = evaluate_l4v(&m, &c, &L4VSetup::standard(), TargetMode::SilverKl).unwrap();
    for rec in &r.records {
        assert!((rec.loss_bits - 3f64.log2()).abs() < 1e-12);
    }
}

#[test]
fn gold_xe_of_uniform_predictor_is_five_bits_over_32_classes() {
    let labels: Vec<String> = (0..32).map(|i| format!("c{i}")).collect();
    let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
    let h = header(1, &refs);
    let b = bx(0.1, 0.1, 0.5, 0.5);
    let mut reg = region(b, vec![0.0], one_hot(32, 7));
    reg.gold_class = Some(7);
    let ex = GroundedExample {
        image_id: "i".into(),
        regions: vec![reg],
        sentence: crate::corpus::Sentence {
            tokens: vec![3, 4],
            phrases: vec![Phrase {
                span: (1, 2),
                aligned_gold_boxes: vec![b],
                head_noun: Some(4),
            }],
        },
    };
    let c = Corpus::new(h, vec![ex]).unwrap();
    let m = ConstantPredictor::uniform(config_for(&c));
    let r = evaluate_l4v(&m, &c, &L4VSetup::standard(), TargetMode::GoldXe).unwrap();
    for rec in &r.records {
        assert!((rec.loss_bits - 5.0).abs() < 1e-12);
    }
}

#[test]
fn gold_xe_requires_gold_labels() {
    let c = three_phrase_corpus();
    let m = ConstantPredictor::uniform(config_for(&c));
    let err = evaluate_l4v(&m, &c, &L4VSetup::standard(), TargetMode::GoldXe).unwrap_err();
    assert!(matches!(err, DiagnoseError::MissingGold { .. }));
}

#[test]
fn constant_predictor_ignores_every_ablation() {
    let c = three_phrase_corpus();
    let mut m = ConstantPredictor::uniform(config_for(&c));
    m.token_row = (0..m.token_row.len()).map(|i| (i as f64 * 0.7).sin()).collect();
    m.region_row = vec![0.3, -1.2, 2.0];
    let v = evaluate_v4l(&m, &c, &V4LSetup::standard()).unwrap();
    let l = evaluate_l4v(&m, &c, &L4VSetup::standard(), TargetMode::SilverKl).unwrap();
    for dp in ["0:0", "0:1", "0:2"] {
        let vs: Vec<f64> = v
            .records
            .iter()
            .filter(|r| r.datapoint_id == dp)
            .map(|r| r.loss_bits)
            .collect();
        let ls: Vec<f64> = l
            .records
            .iter()
            .filter(|r| r.datapoint_id == dp)
            .map(|r| r.loss_bits)
            .collect();
        assert!(vs.iter().all(|&x| x == vs[0]));
        assert!(ls.iter().all(|&x| x == ls[0]));
    }
}

#[test]
fn confident_correct_prediction_costs_nothing() {
    let c = three_phrase_corpus();
    let mut m = ConstantPredictor::uniform(config_for(&c));
    m.region_row = vec![60.0, 0.0, 0.0];
    let r = evaluate_l4v(&m, &c, &[L4VSetup::new(L4VKind::None)], TargetMode::SilverKl).unwrap();
    assert!(r.records[0].loss_bits < 1e-20);
    assert!(r.records[1].loss_bits > 80.0);
}

#[test]
fn object_ablation_takes_duplicates_and_spares_disjoint_regions() {
    let (h, mut ex) = three_phrase_example();
    let dup = ex.regions[0].clone();
    ex.regions.insert(1, dup);
    let c = Corpus::new(h, vec![ex]).unwrap();
    let (ex, ph) = (&c.examples()[0], &c.examples()[0].sentence.phrases[0]);
    let mean = mean_region_feature(&c).unwrap();
    let (input, ablated) = build_v4l_input(ex, ph, &V4LSetup::new(V4LKind::Object), &mean, wrap()).unwrap();
    assert_eq!(ablated, vec![0, 1]);
    assert_eq!(input.regions[0].state, RegionState::Ablated(mean.clone()));
    assert!(matches!(input.regions[2].state, RegionState::Visible(_)));
    assert_eq!(input.tokens[1], TokenSlot::Mask);
    assert_eq!(input.tokens[2], TokenSlot::Mask);
    assert_eq!(input.tokens[3], TokenSlot::Visible(3));

    let (_, all) = build_v4l_input(ex, ph, &V4LSetup::new(V4LKind::All), &mean, wrap()).unwrap();
    assert_eq!(all, vec![0, 1, 2, 3]);
    let (_, none) = build_v4l_input(ex, ph, &V4LSetup::new(V4LKind::None), &mean, wrap()).unwrap();
    assert!(none.is_empty());
}

#[test]
fn l4v_inputs_mask_target_and_ablate_text() {
    let (h, mut ex) = three_phrase_example();
    let dup = ex.regions[1].clone();
    ex.regions.push(dup);
    let c = Corpus::new(h, vec![ex]).unwrap();
    let ex = &c.examples()[0];
    let ph = &ex.sentence.phrases[1];
    let (input, target) = build_l4v_input(ex, ph, 0, &L4VSetup::new(L4VKind::Phrase), wrap()).unwrap();
    assert_eq!(target, 1);
    let masked: Vec<usize> = (0..4)
        .filter(|&r| input.regions[r].state == RegionState::Masked)
        .collect();
    assert_eq!(masked, vec![1, 3]);
    assert_eq!(input.tokens[3], TokenSlot::Ablated);
    assert_eq!(input.tokens[4], TokenSlot::Ablated);
    assert_eq!(input.tokens[1], TokenSlot::Visible(3));

    let (all, _) = build_l4v_input(ex, ph, 0, &L4VSetup::new(L4VKind::All), wrap()).unwrap();
    assert_eq!(all.tokens.len(), 8);
    assert!(all.tokens[1..7].iter().all(|t| *t == TokenSlot::Ablated));
    let single = L4VSetup {
        kind: L4VKind::All,
        all_text_mode: AllTextMode::SingleMask,
    };
    let (one, _) = build_l4v_input(ex, ph, 0, &single, wrap()).unwrap();
    assert_eq!(
        one.tokens,
        vec![
            TokenSlot::Visible(wrap().cls),
            TokenSlot::Ablated,
            TokenSlot::Visible(wrap().sep)
        ]
    );
}

#[test]
fn records_follow_datapoint_then_setup_order() {
    let c = three_phrase_corpus();
    let m = ConstantPredictor::uniform(config_for(&c));
    let r = evaluate_l4v(&m, &c, &L4VSetup::standard(), TargetMode::SilverKl).unwrap();
    let keys: Vec<(String, SetupName)> = r.records.iter().map(|r| (r.datapoint_id.clone(), r.setup)).collect();
    let mut expected = Vec::new();
    for dp in ["0:0", "0:1", "0:2"] {
        for s in [SetupName::None, SetupName::Phrase, SetupName::All] {
            expected.push((dp.to_string(), s));
        }
    }
    assert_eq!(keys, expected);
    assert_eq!(r.records[3].target_region.as_deref(), Some("1"));
}

#[test]
fn csv_round_trip() {
    let c = three_phrase_corpus();
    let m = ConstantPredictor::uniform(config_for(&c));
    let mut r = evaluate_v4l(&m, &c, &V4LSetup::standard()).unwrap();
    r.extend(evaluate_l4v(&m, &c, &L4VSetup::standard(), TargetMode::SilverKl).unwrap());
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with(&CSV_COLUMNS.join(",")));
    assert!(text.contains("0:0,v4l,object,0.5,iot,"));
    assert_eq!(DiagnosticResult::read_csv(&buf[..]).unwrap(), r);

    let mut empty = Vec::new();
    DiagnosticResult::default().write_csv(&mut empty).unwrap();
    assert_eq!(String::from_utf8(empty).unwrap().trim_end(), CSV_COLUMNS.join(","));
}

#[test]
fn mismatched_model_is_rejected() {
    let c = three_phrase_corpus();
    let mut cfg = config_for(&c);
    cfg.num_classes += 1;
    let m = ConstantPredictor::uniform(cfg.clone());
    assert!(matches!(
        evaluate_v4l(&m, &c, &V4LSetup::standard()),
        Err(DiagnoseError::Incompatible(_))
    ));
    assert!(check_comparable(&cfg, &config_for(&c)).is_err());
    assert!(check_comparable(&cfg, &cfg).is_ok());
}

#[test]
fn empty_corpus_gives_empty_result() {
    let c = Corpus::empty(three_phrase_corpus().header().clone());
    let m = ConstantPredictor::uniform(config_for(&three_phrase_corpus()));
    assert!(evaluate_v4l(&m, &c, &V4LSetup::standard()).unwrap().is_empty());
    assert!(evaluate_l4v(&m, &c, &L4VSetup::standard(), TargetMode::SilverKl)
        .unwrap()
        .is_empty());
}

#[test]
fn duplicate_setups_are_rejected() {
    let c = three_phrase_corpus();
    let m = ConstantPredictor::uniform(config_for(&c));
    let s = [L4VSetup::new(L4VKind::All), L4VSetup::new(L4VKind::All)];
    assert!(matches!(
        evaluate_l4v(&m, &c, &s, TargetMode::SilverKl),
        Err(DiagnoseError::DuplicateSetup(_))
    ));
}

#[test]
fn sweep_sorts_thresholds_and_reports_references() {
    let c = three_phrase_corpus();
    let m = ConstantPredictor::uniform(config_for(&c));
    let s = threshold_sweep(&m, &c, &[0.9, 0.1, 0.5, 0.1], OverlapMeasure::IoT).unwrap();
    let taus: Vec<f64> = s.points.iter().map(|p| p.tau).collect();
    assert_eq!(taus, vec![0.1, 0.5, 0.9]);
    assert!(s.points.iter().all(|p| p.mean_ablated == 1.0));
    assert_eq!(s.none_mean, s.all_mean);
    assert_eq!(s.records.len(), 3 * 5);
    assert!(matches!(
        threshold_sweep(&m, &c, &[], OverlapMeasure::IoT),
        Err(DiagnoseError::Sweep(_))
    ));
}

fn arb_box() -> impl Strategy<Value = BoundingBox> {
    (0.0..0.9f64, 0.0..0.9f64, 0.01..0.5f64, 0.01..0.5f64)
        .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, (x + w).min(1.0), (y + h).min(1.0)).unwrap())
}

fn example_with(boxes: &[BoundingBox], gold: &[BoundingBox]) -> (GroundedExample, Phrase) {
    let ph = Phrase {
        span: (0, 1),
        aligned_gold_boxes: gold.to_vec(),
        head_noun: None,
    };
    let ex = GroundedExample {
        image_id: "i".into(),
        regions: boxes
            .iter()
            .map(|&b| region(b, vec![0.0, 0.0], one_hot(3, 0)))
            .collect(),
        sentence: crate::corpus::Sentence {
            tokens: vec![4],
            phrases: vec![ph.clone()],
        },
    };
    (ex, ph)
}

proptest! {
    #[test]
    fn object_ablation_matches_exhaustive_overlap(
        boxes in prop::collection::vec(arb_box(), 1..8),
        gold in prop::collection::vec(arb_box(), 1..3),
        tau in 0.0..=1.0f64,
    ) {
        let (ex, ph) = example_with(&boxes, &gold);
        let setup = V4LSetup::object(OverlapPolicy::new(OverlapMeasure::IoT, tau).unwrap());
        let expected: Vec<usize> = (0..boxes.len())
            .filter(|&r| gold.iter().any(|g| { let v = iot(g, &boxes[r]); v > 0.0 && v >= tau }))
            .collect();
        prop_assert_eq!(v4l_ablated_regions(&ex, &ph, &setup), expected);
    }

    #[test]
    fn l4v_masked_set_contains_target_and_its_overlaps(
        boxes in prop::collection::vec(arb_box(), 1..8),
        gold in arb_box(),
    ) {
        let (ex, _) = example_with(&boxes, &[gold]);
        let (t, masked) = l4v_masked_regions(&ex, &gold).unwrap();
        prop_assert!(masked.contains(&t));
        for r in 0..boxes.len() {
            let v = iot(&boxes[t], &boxes[r]);
            prop_assert_eq!(masked.contains(&r), r == t || v >= 0.5);
        }
    }

    #[test]
    fn ablated_count_never_grows_with_threshold(
        boxes in prop::collection::vec(arb_box(), 1..8),
        gold in prop::collection::vec(arb_box(), 1..3),
        a in 0.0..=1.0f64,
        b in 0.0..=1.0f64,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (ex, ph) = example_with(&boxes, &gold);
        for m in [OverlapMeasure::IoT, OverlapMeasure::IoU] {
            let at = |t| v4l_ablated_regions(&ex, &ph, &V4LSetup::object(OverlapPolicy::new(m, t).unwrap()));
            let (l, h) = (at(lo), at(hi));
            prop_assert!(h.iter().all(|r| l.contains(r)));
        }
    }
}
