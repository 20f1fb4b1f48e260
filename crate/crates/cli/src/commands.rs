//! One function per subcommand. Inputs are only read; every file goes under `--out`.

use crate::failure::Failure;
use crate::manifest::Recorder;
use crate::{AnalyzeArgs, DiagnoseArgs, FormatArg, StatsArgs, SweepArgs, SynthArgs, TargetArg, TrainArgs};
use log::info;
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use xablate::analyze::{aggregate, aggregate_seeds, confusion_matrix, emit_report, Report, ReportFormat, SweepSeries};
use xablate::corpus::{
    agreement_stats, corpus_stats, label_match_subset, load_corpus, save_corpus, Corpus, StatsRecord,
};
use xablate::diagnose::{
    check_comparable, evaluate_l4v, evaluate_v4l, threshold_sweep, AllTextMode, Diagnostic, DiagnosticResult, L4VSetup,
    SetupName, TargetMode, V4LSetup,
};
use xablate::geometry::OverlapPolicy;
use xablate::model::{Checkpoint, MultimodalModel, Predictor};
use xablate::synth::{ConfusionKind, SynthConfig};
use xablate::train::{write_loss_log, TrainPlan};

const AGREEMENT_KS: [usize; 3] = [1, 3, 5];

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::usage(format!("invalid config {}: {e}", path.display())))
}

fn read_corpus(path: &Path, label_match: bool) -> Result<Corpus, Failure> {
    let c = load_corpus(path).map_err(|e| Failure::from(e).context(path.display()))?;
    if label_match {
        Ok(label_match_subset(&c)?)
    } else {
        Ok(c)
    }
}

fn read_model(path: &Path) -> Result<MultimodalModel, Failure> {
    MultimodalModel::load(path).map_err(|e| Failure::from(e).context(path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::other(format!("cannot create {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(std::io::Error::other)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<(), Failure> {
    let mut cfg: SynthConfig = read_toml(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.noise_rate {
        cfg.noise.rate = r;
        if r == 0.0 {
            cfg.noise.kind = ConfusionKind::None;
        }
    }
    let mut rec = Recorder::start("synth", &a.out)?;
    rec.input(&a.config);
    rec.config(&cfg);
    rec.seed("synth", cfg.seed);
    let (train, eval, manifest) = cfg.generate_split()?;
    save_corpus(&train, rec.output("corpus.jsonl"))?;
    if cfg.held_out_images > 0 {
        save_corpus(&eval, rec.output("eval.jsonl"))?;
    }
    let mut w = create(&rec.output("generator_regions.jsonl"))?;
    manifest.write_regions(&mut w)?;
    w.flush()?;
    let mut w = create(&rec.output("generator_phrases.jsonl"))?;
    manifest.write_phrases(&mut w)?;
    w.flush()?;
    info!("wrote {} training and {} held-out examples", train.len(), eval.len());
    rec.finish()
}

#[derive(Serialize)]
struct StatsReport {
    #[serde(flatten)]
    stats: StatsRecord,
    /// Top-k agreement of silver labels with gold, keyed by k.
    #[serde(skip_serializing_if = "Option::is_none")]
    agreement: Option<std::collections::BTreeMap<usize, f64>>,
}

pub fn stats(a: &StatsArgs) -> Result<(), Failure> {
    let c = read_corpus(&a.corpus, a.label_match)?;
    let report = StatsReport {
        stats: corpus_stats(&c),
        agreement: if a.label_match && !c.is_empty() {
            Some(agreement_stats(&c, &AGREEMENT_KS)?)
        } else {
            None
        },
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("stats serialize"));
    if let Some(out) = &a.out {
        let mut rec = Recorder::start("stats", out)?;
        rec.input(&a.corpus);
        rec.config(&serde_json::json!({ "label_match": a.label_match }));
        write_json(&rec.output("stats.json"), &report)?;
        rec.finish()?;
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<(), Failure> {
    let mut plan: TrainPlan = read_toml(&a.config)?;
    if let Some(r) = a.regime {
        plan.regime = r;
    }
    if let Some(e) = a.epochs {
        plan.train.epochs = e;
    }
    if let Some(e) = a.vision_epochs {
        plan.train.vision_epochs = e;
    }
    if let Some(s) = a.seed {
        plan.train.seed = s;
    }
    if let Some(lr) = a.learning_rate {
        plan.train.learning_rate = lr;
    }
    if let Some(o) = a.vision_objective {
        plan.train.vision_objective = o.into();
    }
    let corpus = read_corpus(&a.corpus, false)?;
    let text_init = match &a.text_init {
        Some(p) => {
            if !plan.regime.needs_text_init() {
                return Err(Failure::usage(format!(
                    "regime {} starts from random weights; drop --text-init",
                    plan.regime
                )));
            }
            Some(Checkpoint::load(p).map_err(|e| Failure::from(e).context(p.display()))?)
        }
        None => None,
    };
    let mut rec = Recorder::start("train", &a.out)?;
    rec.input(&a.corpus);
    if let Some(p) = &a.text_init {
        rec.input(p);
    }
    rec.input(&a.config);
    rec.config(&plan);
    rec.seed("train", plan.train.seed);
    info!("training {} on {} examples", plan.regime, corpus.len());
    let out = plan.run(&corpus, text_init.as_ref())?;
    if let Some(ck) = &out.text_checkpoint {
        ck.save(rec.output("text_pretrain.ckpt"))?;
        let mut w = create(&rec.output("text_loss_log.csv"))?;
        write_loss_log(&out.text_log, &mut w)?;
        w.flush()?;
    }
    out.model.save(rec.output("model.ckpt"))?;
    let mut w = create(&rec.output("loss_log.csv"))?;
    write_loss_log(&out.log, &mut w)?;
    w.flush()?;
    rec.finish()
}

#[derive(Serialize)]
struct DiagnoseSettings<'a> {
    diagnostics: Vec<String>,
    setups: Vec<String>,
    target: &'a str,
    tau: f64,
    measure: String,
    label_match: bool,
    single_mask: bool,
}

fn setups_for(
    wanted: &[SetupName],
    diagnostics: &[Diagnostic],
    policy: OverlapPolicy,
    mode: AllTextMode,
) -> Result<(Vec<V4LSetup>, Vec<L4VSetup>), Failure> {
    const ALL: [SetupName; 4] = [SetupName::None, SetupName::Object, SetupName::Phrase, SetupName::All];
    // An empty request means every setup of the selected diagnostics.
    let (wanted, strict) = if wanted.is_empty() {
        (&ALL[..], false)
    } else {
        (wanted, true)
    };
    let mut v4l = Vec::new();
    let mut l4v = Vec::new();
    for &s in wanted {
        let mut used = false;
        if diagnostics.contains(&Diagnostic::V4L) {
            if let Ok(v) = V4LSetup::from_name(s, policy) {
                if !v4l.contains(&v) {
                    v4l.push(v);
                }
                used = true;
            }
        }
        if diagnostics.contains(&Diagnostic::L4V) {
            if let Ok(l) = L4VSetup::from_name(s, mode) {
                if !l4v.contains(&l) {
                    l4v.push(l);
                }
                used = true;
            }
        }
        if strict && !used {
            return Err(Failure::usage(format!(
                "setup {s} does not apply to the selected diagnostics"
            )));
        }
    }
    Ok((v4l, l4v))
}

pub fn diagnose(a: &DiagnoseArgs) -> Result<(), Failure> {
    let policy = OverlapPolicy::new(a.measure, a.tau).map_err(|e| Failure::usage(e.to_string()))?;
    let mode = if a.single_mask {
        AllTextMode::SingleMask
    } else {
        AllTextMode::MaskEach
    };
    let (v4l, l4v) = setups_for(&a.setups, &a.diagnostic, policy, mode)?;
    let model = read_model(&a.checkpoint)?;
    let corpus = read_corpus(&a.corpus, a.label_match)?;
    let mut rec = Recorder::start("diagnose", &a.out)?;
    rec.input(&a.checkpoint);
    rec.input(&a.corpus);
    rec.config(&DiagnoseSettings {
        diagnostics: a.diagnostic.iter().map(|d| d.to_string()).collect(),
        setups: a.setups.iter().map(|s| s.to_string()).collect(),
        target: match a.target {
            TargetArg::Silver => "silver",
            TargetArg::Gold => "gold",
        },
        tau: a.tau,
        measure: a.measure.to_string(),
        label_match: a.label_match,
        single_mask: a.single_mask,
    });
    let target = match a.target {
        TargetArg::Silver => TargetMode::SilverKl,
        TargetArg::Gold => TargetMode::GoldXe,
    };
    let mut result = DiagnosticResult::default();
    if !v4l.is_empty() {
        result.extend(evaluate_v4l(&model, &corpus, &v4l)?);
    }
    if !l4v.is_empty() {
        result.extend(evaluate_l4v(&model, &corpus, &l4v, target)?);
    }
    let mut w = create(&rec.output("results.csv"))?;
    result.write_csv(&mut w)?;
    w.flush()?;
    if !result.is_empty() {
        let report = Report {
            aggregates: aggregate(&result)?,
            ..Default::default()
        };
        let mut written = emit_report(&report, ReportFormat::Csv, &a.out)?;
        written.extend(emit_report(&report, ReportFormat::Svg, &a.out)?);
        rec.outputs_written(&written);
    }
    rec.finish()
}

/// Labels from the flag, else checkpoint file stems made unique by position.
fn series_labels(checkpoints: &[PathBuf], given: &[String]) -> Result<Vec<String>, Failure> {
    if !given.is_empty() {
        if given.len() != checkpoints.len() {
            return Err(Failure::usage(format!(
                "{} labels for {} checkpoints",
                given.len(),
                checkpoints.len()
            )));
        }
        let mut seen = given.to_vec();
        seen.sort();
        seen.dedup();
        if seen.len() != given.len() {
            return Err(Failure::usage("series labels must be distinct"));
        }
        return Ok(given.to_vec());
    }
    let stems: Vec<String> = checkpoints
        .iter()
        .map(|p| {
            p.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
        .collect();
    let distinct = stems.iter().collect::<std::collections::BTreeSet<_>>().len() == stems.len();
    Ok(if distinct {
        stems
    } else {
        stems.iter().enumerate().map(|(i, s)| format!("{i}-{s}")).collect()
    })
}

pub fn sweep(a: &SweepArgs) -> Result<(), Failure> {
    if a.taus.is_empty() {
        return Err(Failure::usage("--taus needs at least one threshold"));
    }
    let labels = series_labels(&a.checkpoint, &a.label)?;
    let models = a
        .checkpoint
        .iter()
        .map(|p| read_model(p))
        .collect::<Result<Vec<_>, _>>()?;
    for m in &models[1..] {
        check_comparable(models[0].config(), m.config())?;
    }
    let corpus = read_corpus(&a.corpus, a.label_match)?;
    let mut rec = Recorder::start("sweep", &a.out)?;
    for p in &a.checkpoint {
        rec.input(p);
    }
    rec.input(&a.corpus);
    rec.config(&serde_json::json!({
        "taus": a.taus,
        "measure": a.measure.to_string(),
        "labels": labels,
        "label_match": a.label_match,
    }));
    let mut series = Vec::new();
    for (m, label) in models.iter().zip(&labels) {
        let sweep = threshold_sweep(m, &corpus, &a.taus, a.measure)?;
        let mut w = create(&rec.output(&format!("records_{label}.csv")))?;
        sweep.records.write_csv(&mut w)?;
        w.flush()?;
        series.push(SweepSeries {
            label: label.clone(),
            sweep,
        });
    }
    let report = Report {
        sweeps: series,
        ..Default::default()
    };
    let mut written = emit_report(&report, ReportFormat::Csv, &a.out)?;
    written.extend(emit_report(&report, ReportFormat::Svg, &a.out)?);
    rec.outputs_written(&written);
    rec.finish()
}

pub fn analyze(a: &AnalyzeArgs) -> Result<(), Failure> {
    if a.results.is_empty() && a.corpus.is_none() {
        return Err(Failure::usage("nothing to analyze: give --results and/or --corpus"));
    }
    let mut rec = Recorder::start("analyze", &a.out)?;
    rec.config(&serde_json::json!({
        "label_match": a.label_match,
        "formats": a.format.iter().map(|f| format!("{f:?}").to_lowercase()).collect::<Vec<_>>(),
    }));
    let mut runs = Vec::new();
    for p in &a.results {
        rec.input(p);
        let file = File::open(p).map_err(|e| Failure::other(format!("cannot read {}: {e}", p.display())))?;
        let r = DiagnosticResult::read_csv(file).map_err(|e| Failure::from(e).context(p.display()))?;
        runs.push(aggregate(&r).map_err(|e| Failure::from(e).context(p.display()))?);
    }
    let mut report = Report::default();
    match runs.len() {
        0 => {}
        1 => report.aggregates = runs.pop().expect("one run"),
        _ => report.seeds = aggregate_seeds(&runs)?,
    }
    if let Some(p) = &a.corpus {
        rec.input(p);
        let c = read_corpus(p, a.label_match)?;
        report.confusion = Some(confusion_matrix(&c)?);
        write_json(&rec.output("agreement.json"), &agreement_stats(&c, &AGREEMENT_KS)?)?;
    }
    for f in &a.format {
        let format = match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Svg => ReportFormat::Svg,
        };
        let written = emit_report(&report, format, &a.out)?;
        rec.outputs_written(&written);
    }
    rec.finish()
}
