use super::*;
use crate::geometry::BoundingBox;
use rand::{Rng, SeedableRng};

pub(crate) fn tiny_config(arch: Architecture) -> ModelConfig {
    ModelConfig {
        architecture: arch,
        vision_only_layers: usize::from(arch == Architecture::DualStream),
        text_only_layers: usize::from(arch == Architecture::DualStream),
        cross_layers: 1,
        hidden: 8,
        heads: 2,
        ffn_dim: 12,
        vocab_size: 16,
        num_classes: 4,
        feature_dim: 3,
        max_tokens: 8,
        max_regions: 4,
        use_box_embedding: true,
        mask_token: 3,
    }
}

fn random_input(rng: &mut ChaCha8Rng, cfg: &ModelConfig, n_t: usize, n_v: usize) -> ModelInput {
    let tokens = (0..n_t)
        .map(|i| match i % 4 {
            1 => TokenSlot::Mask,
            _ => TokenSlot::Visible(rng.random_range(0..cfg.vocab_size)),
        })
        .collect();
    let regions = (0..n_v)
        .map(|i| {
            let x = rng.random_range(0.0..0.5);
            let y = rng.random_range(0.0..0.5);
            let feat: Vec<f64> = (0..cfg.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            RegionSlot {
                bbox: BoundingBox::new(x, y, x + 0.3, y + 0.4).unwrap(),
                state: match i % 3 {
                    0 => RegionState::Visible(feat),
                    1 => RegionState::Masked,
                    _ => RegionState::Ablated(feat),
                },
            }
        })
        .collect();
    ModelInput { tokens, regions }
}

fn block_params(h: usize, f: usize) -> usize {
    2 * h + 4 * (h * h + h) + 2 * h + (h * f + f) + (f * h + h)
}

fn closed_form_count(c: &ModelConfig) -> usize {
    let (h, f) = (c.hidden, c.ffn_dim);
    let text = c.vocab_size * h + c.max_tokens * h + h + 2 * h;
    let vision = (c.feature_dim * h + h) + if c.use_box_embedding { 5 * h + h } else { 0 } + h + 2 * h;
    let enc = match c.architecture {
        Architecture::SingleStream => c.cross_layers * block_params(h, f) + 2 * h,
        Architecture::DualStream => {
            (c.text_only_layers + c.vision_only_layers) * block_params(h, f)
                + c.cross_layers * 2 * (2 * h + 4 * (h * h + h) + block_params(h, f))
                + 4 * h
        }
    };
    let heads = (h * h + h) + 2 * h + c.vocab_size // mlm, tied decoder
        + (h * h + h) + 2 * h + (h * c.num_classes + c.num_classes)
        + (h + 1);
    text + vision + enc + heads
}

#[test]
fn parameter_count_matches_closed_form() {
    for arch in [Architecture::SingleStream, Architecture::DualStream] {
        let cfg = tiny_config(arch);
        let m = init_model(&cfg, 1, None).unwrap();
        assert_eq!(m.parameter_count(), closed_form_count(&cfg), "{arch}");
    }
    let mut cfg = tiny_config(Architecture::SingleStream);
    cfg.use_box_embedding = false;
    let m = init_model(&cfg, 1, None).unwrap();
    assert_eq!(block_params(8, 12), 532);
    // text 216, vision 56, encoder 548, mlm 104, mrc 124, itm 9
    assert_eq!(m.parameter_count(), 1057);
}

#[test]
fn initialization_is_seeded() {
    let cfg = tiny_config(Architecture::DualStream);
    assert_eq!(init_model(&cfg, 5, None).unwrap(), init_model(&cfg, 5, None).unwrap());
    assert_ne!(init_model(&cfg, 5, None).unwrap(), init_model(&cfg, 6, None).unwrap());
}

#[test]
fn init_from_copies_text_tower_only() {
    let cfg = tiny_config(Architecture::SingleStream);
    let donor = init_model(&cfg, 11, None).unwrap();
    let ck = donor.text_checkpoint();
    assert!(ck.params.get("vision.feat.w").is_none());
    assert!(ck.params.get("mrc.out.w").is_none());
    let m = init_model(&cfg, 12, Some(&ck)).unwrap();
    let fresh = init_model(&cfg, 12, None).unwrap();
    for (name, v) in m.params().iter() {
        if cfg.is_text_tower(name) {
            assert_eq!(v, donor.params().get(name).unwrap(), "{name}");
        } else {
            assert_eq!(v, fresh.params().get(name).unwrap(), "{name}");
        }
    }
    let mut wide = cfg.clone();
    wide.hidden = 12;
    assert!(matches!(
        init_model(&wide, 1, Some(&ck)),
        Err(ModelError::ShapeMismatch { .. })
    ));
}

#[test]
fn config_invariants() {
    let mut c = tiny_config(Architecture::SingleStream);
    c.heads = 3;
    assert!(c.validate().is_err());
    let mut c = tiny_config(Architecture::SingleStream);
    c.text_only_layers = 1;
    assert!(c.validate().is_err());
    let mut c = tiny_config(Architecture::DualStream);
    c.cross_layers = 0;
    assert!(c.validate().is_err());
}

#[test]
fn forward_is_pure_and_shaped() {
    let cfg = tiny_config(Architecture::DualStream);
    let m = init_model(&cfg, 2, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = random_input(&mut rng, &cfg, 6, 3);
    let a = m.forward(&input).unwrap();
    assert_eq!(a, m.forward(&input).unwrap());
    assert_eq!(a.token_logits.shape(), (6, 16));
    assert_eq!(a.region_logits.shape(), (3, 4));
}

#[test]
fn forward_without_regions() {
    for arch in [Architecture::SingleStream, Architecture::DualStream] {
        let cfg = tiny_config(arch);
        let m = init_model(&cfg, 2, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = m.forward(&random_input(&mut rng, &cfg, 5, 0)).unwrap();
        assert_eq!(out.region_logits.shape(), (0, 4));
    }
}

#[test]
fn input_limits_are_enforced() {
    let cfg = tiny_config(Architecture::SingleStream);
    let m = init_model(&cfg, 2, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    assert!(matches!(
        m.forward(&random_input(&mut rng, &cfg, 9, 1)),
        Err(ModelError::Input(_))
    ));
    assert!(matches!(
        m.forward(&random_input(&mut rng, &cfg, 3, 5)),
        Err(ModelError::Input(_))
    ));
    let blind = ModelInput {
        tokens: vec![TokenSlot::Mask, TokenSlot::Ablated],
        regions: vec![],
    };
    assert!(matches!(m.forward(&blind), Err(ModelError::Input(_))));
}

#[test]
fn region_permutation_equivariance_without_boxes() {
    for arch in [Architecture::SingleStream, Architecture::DualStream] {
        let mut cfg = tiny_config(arch);
        cfg.use_box_embedding = false;
        let m = init_model(&cfg, 8, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = random_input(&mut rng, &cfg, 5, 4);
        let perm = [2, 0, 3, 1];
        let mut shuffled = input.clone();
        shuffled.regions = perm.iter().map(|&i| input.regions[i].clone()).collect();
        let a = m.forward(&input).unwrap();
        let b = m.forward(&shuffled).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            for (x, y) in a.region_logits.row(i).iter().zip(b.region_logits.row(j)) {
                assert!((x - y).abs() < 1e-12, "{arch}");
            }
        }
        for (x, y) in a.token_logits.data().iter().zip(b.token_logits.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

fn output(tokens: Vec<Vec<f64>>, regions: Vec<Vec<f64>>, itm: f64) -> ModelOutput {
    ModelOutput {
        token_logits: Matrix::from_rows(&tokens),
        region_logits: Matrix::from_rows(&regions),
        itm_logit: itm,
    }
}

/// −log p computed as ln Σ exp(x_j − x_i) with the terms summed in ascending order.
fn oracle_neg_log_prob(x: &[f64], i: usize) -> f64 {
    let mut terms: Vec<f64> = x.iter().map(|v| (v - x[i]).exp()).collect();
    terms.sort_by(f64::total_cmp);
    terms.iter().sum::<f64>().ln() / std::f64::consts::LN_2
}

#[test]
fn uniform_losses_are_closed_form() {
    let out = output(vec![vec![0.0; 1024]; 3], vec![vec![0.0; 2]; 1], 0.0);
    assert!((mlm_loss(&out, &[0, 2], &[5, 1000]).unwrap() - 20.0).abs() < 1e-12);
    assert!((mrc_kl_loss(&out, 0, &[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!(mrc_kl_loss(&out, 0, &[0.5, 0.5]).unwrap().abs() < 1e-12);
    assert!((itm_loss(&out, true) - 1.0).abs() < 1e-12);
    assert!((itm_loss(&out, false) - 1.0).abs() < 1e-12);
    let out8 = output(vec![vec![0.0; 4]], vec![vec![0.0; 8]], 0.0);
    assert!((mrc_xe_loss(&out8, 0, 5, 1.0).unwrap() - 3.0).abs() < 1e-12);
    assert_eq!(mrc_xe_loss(&out8, 0, 5, 0.0).unwrap(), 0.0);
}

#[test]
fn saturated_losses_vanish() {
    let out = output(vec![vec![0.0, 800.0, 0.0]], vec![vec![-900.0, 900.0]], 900.0);
    assert!(mlm_loss(&out, &[0], &[1]).unwrap() < 1e-300);
    assert!(mrc_xe_loss(&out, 0, 1, 1.0).unwrap() < 1e-300);
    assert!(mrc_kl_loss(&out, 0, &[0.0, 1.0]).unwrap() < 1e-300);
    assert!(itm_loss(&out, true) < 1e-300);
    assert!(itm_loss(&out, false) > 1000.0);
}

#[test]
fn losses_match_oracle_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let row = |rng: &mut ChaCha8Rng, n| (0..n).map(|_| rng.random_range(-4.0..4.0)).collect::<Vec<f64>>();
        let toks = vec![row(&mut rng, 7), row(&mut rng, 7)];
        let regs = vec![row(&mut rng, 5)];
        let z = rng.random_range(-6.0..6.0);
        let out = output(toks.clone(), regs.clone(), z);
        let (t0, t1) = (rng.random_range(0..7), rng.random_range(0..7));
        let want = oracle_neg_log_prob(&toks[0], t0) + oracle_neg_log_prob(&toks[1], t1);
        assert!((mlm_loss(&out, &[0, 1], &[t0, t1]).unwrap() - want).abs() < 1e-9);

        let class = rng.random_range(0..5);
        let w: f64 = rng.random_range(0.0..1.0);
        let want = w * oracle_neg_log_prob(&regs[0], class);
        assert!((mrc_xe_loss(&out, 0, class, w).unwrap() - want).abs() < 1e-9);

        let mut p: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
        p[rng.random_range(0..5)] = 0.0;
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        let want: f64 = p
            .iter()
            .enumerate()
            .filter(|(_, &pi)| pi > 0.0)
            .map(|(i, &pi)| pi * (pi.log2() + oracle_neg_log_prob(&regs[0], i)))
            .sum();
        assert!((mrc_kl_loss(&out, 0, &p).unwrap() - want).abs() < 1e-9);

        let sig = 1.0 / (1.0 + (-z).exp());
        assert!((itm_loss(&out, true) + sig.log2()).abs() < 1e-9);
        assert!((itm_loss(&out, false) + (1.0 - sig).log2()).abs() < 1e-9);
    }
}

#[test]
fn loss_preconditions() {
    let out = output(vec![vec![0.0; 4]], vec![vec![0.0; 3]], 0.0);
    assert!(matches!(mlm_loss(&out, &[], &[]), Err(ModelError::EmptyMask)));
    assert!(mrc_kl_loss(&out, 0, &[0.5, 0.6, 0.0]).is_err());
    assert!(mrc_xe_loss(&out, 0, 3, 1.0).is_err());
    assert!(mrc_xe_loss(&out, 0, 0, 1.5).is_err());
}

fn full_selection(input: &ModelInput, cfg: &ModelConfig) -> LossSelection {
    let mut sel = LossSelection {
        itm: Some(true),
        ..Default::default()
    };
    for (i, t) in input.tokens.iter().enumerate() {
        if *t == TokenSlot::Mask {
            sel.mlm.push((i, (i * 5) % cfg.vocab_size));
        }
    }
    sel.mrc.push(MrcTarget::Kl {
        region: 1,
        dist: vec![0.1, 0.6, 0.0, 0.3],
    });
    sel.mrc.push(MrcTarget::Xe {
        region: 0,
        class: 2,
        weight: 0.7,
    });
    sel
}

#[test]
fn gradients_match_finite_differences() {
    for arch in [Architecture::SingleStream, Architecture::DualStream] {
        let cfg = tiny_config(arch);
        let m = init_model(&cfg, 31, None).unwrap();
        assert!(m.parameter_count() <= 5000);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let input = random_input(&mut rng, &cfg, 7, 3);
        let sel = full_selection(&input, &cfg);
        let (_, grads) = m.gradients(&input, &sel).unwrap();
        let loss = |m: &MultimodalModel| m.gradients(&input, &sel).unwrap().0.total;
        let h = 1e-4;
        let mut checked = 0;
        while checked < 60 {
            let id = rng.random_range(0..m.params().len());
            let k = rng.random_range(0..m.params().value(id).len());
            let mut plus = m.clone();
            plus.params_mut().value_mut(id).data_mut()[k] += h;
            let mut minus = m.clone();
            minus.params_mut().value_mut(id).data_mut()[k] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = grads.get(id).data()[k];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < 1e-4, "{arch} {}[{k}]: fd {fd} analytic {an}", m.params().name(id));
            checked += 1;
        }
    }
}

#[test]
fn zero_weights_give_zero_gradients() {
    let cfg = tiny_config(Architecture::SingleStream);
    let m = init_model(&cfg, 1, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = random_input(&mut rng, &cfg, 6, 3);
    let mut sel = full_selection(&input, &cfg);
    sel.weights = LossWeights {
        mlm: 0.0,
        mrc: 0.0,
        itm: 0.0,
    };
    let (parts, g) = m.gradients(&input, &sel).unwrap();
    assert!(g.is_zero());
    assert!(parts.mlm > 0.0 && parts.total == 0.0);
}

#[test]
fn unused_head_gets_no_gradient() {
    let cfg = tiny_config(Architecture::SingleStream);
    let m = init_model(&cfg, 1, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = random_input(&mut rng, &cfg, 6, 3);
    let sel = LossSelection {
        mlm: vec![(1, 4)],
        ..Default::default()
    };
    let (_, g) = m.gradients(&input, &sel).unwrap();
    for name in ["mrc.out.w", "mrc.dense.w", "itm.w", "itm.b"] {
        let id = m.params().id(name).unwrap();
        assert!(g.get(id).data().iter().all(|&v| v == 0.0), "{name}");
    }
    assert!(g
        .get(m.params().id("text.token_emb").unwrap())
        .data()
        .iter()
        .any(|&v| v != 0.0));
}

#[test]
fn gradient_losses_agree_with_output_losses() {
    let cfg = tiny_config(Architecture::DualStream);
    let m = init_model(&cfg, 1, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = random_input(&mut rng, &cfg, 6, 3);
    let sel = full_selection(&input, &cfg);
    let (parts, _) = m.gradients(&input, &sel).unwrap();
    let out = m.forward(&input).unwrap();
    let (pos, toks): (Vec<usize>, Vec<usize>) = sel.mlm.iter().copied().unzip();
    assert!((parts.mlm - mlm_loss(&out, &pos, &toks).unwrap()).abs() < 1e-12);
    let mrc = mrc_kl_loss(&out, 1, &[0.1, 0.6, 0.0, 0.3]).unwrap() + mrc_xe_loss(&out, 0, 2, 0.7).unwrap();
    assert!((parts.mrc - mrc).abs() < 1e-12);
    assert!((parts.itm - itm_loss(&out, true)).abs() < 1e-12);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let cfg = tiny_config(Architecture::DualStream);
    let m = init_model(&cfg, 77, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path).unwrap();
    let back = MultimodalModel::load(&path).unwrap();
    assert_eq!(back, m);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = random_input(&mut rng, &cfg, 6, 3);
    assert_eq!(back.forward(&input).unwrap(), m.forward(&input).unwrap());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let cfg = tiny_config(Architecture::SingleStream);
    let bytes = init_model(&cfg, 77, None).unwrap().checkpoint().to_bytes();
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 1;
    assert!(Checkpoint::from_bytes(&flipped).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]).is_err());
    let mut old = bytes.clone();
    old[8] = 9;
    let err = Checkpoint::from_bytes(&old).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");
    assert!(Checkpoint::from_bytes(b"garbage").is_err());
    let text = init_model(&cfg, 77, None).unwrap().text_checkpoint();
    assert!(MultimodalModel::from_checkpoint(text).is_err());
}

#[test]
fn constant_predictor_ignores_input() {
    let cfg = tiny_config(Architecture::SingleStream);
    let stub = ConstantPredictor::uniform(cfg.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let out = stub.forward(&random_input(&mut rng, &cfg, 5, 2)).unwrap();
    assert_eq!(out.token_logits.shape(), (5, 16));
    assert_eq!(out.region_logits.shape(), (2, 4));
    assert!((mlm_loss(&out, &[1, 2], &[0, 9]).unwrap() - 8.0).abs() < 1e-12);
}
