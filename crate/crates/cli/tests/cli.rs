use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use xablate::model::{init_model, Checkpoint};
use xablate::train::TrainPlan;

const BIN: &str = env!("CARGO_BIN_EXE_xablate");

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Synthesizes the tiny corpus and trains the tiny model under `root`.
fn pipeline(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    let model = root.join("model");
    ok(&["synth", "--config", p(&fixture("tiny_synth.toml")), "--out", p(&data)]);
    ok(&[
        "--threads",
        "1",
        "train",
        "--corpus",
        p(&data.join("corpus.jsonl")),
        "--config",
        p(&fixture("tiny_train.toml")),
        "--out",
        p(&model),
    ]);
    (data, model)
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["synth", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&[
        "synth",
        "--config",
        p(&dir.path().join("absent.toml")),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.toml"));
}

#[test]
fn synth_is_reproducible_and_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--config", p(&fixture("tiny_synth.toml")), "--out", p(d)]);
    }
    for f in [
        "corpus.jsonl",
        "eval.jsonl",
        "generator_regions.jsonl",
        "generator_phrases.jsonl",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    assert!(a.join("run_manifest.json").exists());
    let out = ok(&["stats", "--corpus", p(&a.join("corpus.jsonl")), "--label-match"]);
    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stats["num_images"], 16);
    assert!(stats["agreement"]["1"].as_f64().unwrap() <= 1.0);
}

#[test]
fn zero_epochs_checkpoint_equals_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--config", p(&fixture("tiny_synth.toml")), "--out", p(&data)]);
    let out = dir.path().join("m");
    let corpus = data.join("corpus.jsonl");
    ok(&[
        "train",
        "--corpus",
        p(&corpus),
        "--config",
        p(&fixture("tiny_train.toml")),
        "--out",
        p(&out),
        "--epochs",
        "0",
    ]);
    let plan: TrainPlan = toml::from_str(&std::fs::read_to_string(fixture("tiny_train.toml")).unwrap()).unwrap();
    let c = xablate::corpus::load_corpus(&corpus).unwrap();
    let cfg = plan.model.for_corpus(c.header()).unwrap();
    let init = init_model(&cfg, plan.train.seed, None).unwrap();
    let saved = Checkpoint::load(out.join("model.ckpt")).unwrap();
    assert_eq!(saved.to_bytes(), init.checkpoint().to_bytes());
}

#[test]
fn unknown_regime_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--corpus",
        "x.jsonl",
        "--config",
        p(&fixture("tiny_train.toml")),
        "--out",
        p(dir.path()),
        "--regime",
        "rnd",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_three_and_names_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--config", p(&fixture("tiny_synth.toml")), "--out", p(&data)]);
    let out = run(&[
        "train",
        "--corpus",
        p(&data.join("corpus.jsonl")),
        "--config",
        p(&fixture("divergent_train.toml")),
        "--out",
        p(&dir.path().join("m")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step"));
}

#[test]
fn diagnose_pipeline_and_golden_results() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = pipeline(dir.path());
    let ckpt = model.join("model.ckpt");
    let eval = data.join("eval.jsonl");

    let full = dir.path().join("full");
    ok(&[
        "diagnose",
        "--checkpoint",
        p(&ckpt),
        "--corpus",
        p(&eval),
        "--out",
        p(&full),
    ]);
    let results = std::fs::read_to_string(full.join("results.csv")).unwrap();
    let golden = fixture("golden_results.csv");
    if std::env::var_os("XABLATE_BLESS").is_some() {
        std::fs::write(&golden, &results).unwrap();
    }
    assert_eq!(results, std::fs::read_to_string(&golden).unwrap());
    for f in ["aggregate.csv", "aggregate.svg", "run_manifest.json"] {
        assert!(full.join(f).exists(), "{f}");
    }
    assert_eq!(
        std::fs::read_to_string(full.join("aggregate.csv"))
            .unwrap()
            .lines()
            .count(),
        7
    );

    let none = dir.path().join("none");
    ok(&[
        "diagnose",
        "--checkpoint",
        p(&ckpt),
        "--corpus",
        p(&eval),
        "--out",
        p(&none),
        "--setups",
        "none",
        "--diagnostic",
        "v4l",
    ]);
    let agg = std::fs::read_to_string(none.join("aggregate.csv")).unwrap();
    let rows: Vec<&str> = agg.lines().collect();
    assert_eq!(rows.len(), 2);
    let cols: Vec<&str> = rows[1].split(',').collect();
    assert_eq!((cols[0], cols[1], cols[6]), ("v4l", "none", "0.0"));

    let gold = run(&[
        "diagnose",
        "--checkpoint",
        p(&ckpt),
        "--corpus",
        p(&eval),
        "--out",
        p(&dir.path().join("g")),
        "--diagnostic",
        "l4v",
        "--target",
        "gold",
    ]);
    assert_eq!(gold.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&gold.stderr).contains("gold label"));
    ok(&[
        "diagnose",
        "--checkpoint",
        p(&ckpt),
        "--corpus",
        p(&eval),
        "--out",
        p(&dir.path().join("g2")),
        "--diagnostic",
        "l4v",
        "--target",
        "gold",
        "--label-match",
    ]);

    let an = dir.path().join("an");
    ok(&[
        "analyze",
        "--results",
        p(&full.join("results.csv")),
        p(&full.join("results.csv")),
        "--corpus",
        p(&eval),
        "--label-match",
        "--out",
        p(&an),
    ]);
    for f in [
        "seeds.csv",
        "seeds.svg",
        "confusion.csv",
        "confusion_columns.csv",
        "confusion.svg",
        "agreement.json",
    ] {
        assert!(an.join(f).exists(), "{f}");
    }
}

#[test]
fn incompatible_corpus_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = pipeline(dir.path());
    let other = dir.path().join("other");
    let cfg = std::fs::read_to_string(fixture("tiny_synth.toml"))
        .unwrap()
        .replace("feature_dim = 8", "feature_dim = 5");
    let cfg_path = dir.path().join("other.toml");
    std::fs::write(&cfg_path, cfg).unwrap();
    ok(&["synth", "--config", p(&cfg_path), "--out", p(&other)]);
    let out = run(&[
        "diagnose",
        "--checkpoint",
        p(&model.join("model.ckpt")),
        "--corpus",
        p(&other.join("eval.jsonl")),
        "--out",
        p(&dir.path().join("d")),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn sweep_sorts_thresholds_and_reports_every_series() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = pipeline(dir.path());
    let ckpt = model.join("model.ckpt");
    let out = dir.path().join("sweep");
    ok(&[
        "sweep",
        "--checkpoint",
        p(&ckpt),
        p(&ckpt),
        "--label",
        "a,b",
        "--corpus",
        p(&data.join("eval.jsonl")),
        "--taus",
        "0.8,0.2,0.5",
        "--out",
        p(&out),
    ]);
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let taus: Vec<&str> = csv
        .lines()
        .skip(1)
        .filter(|l| l.starts_with("a,"))
        .map(|l| l.split(',').nth(2).unwrap())
        .collect();
    assert_eq!(taus, vec!["0.2", "0.5", "0.8"]);
    assert_eq!(csv.lines().count(), 7);
    for f in ["sweep.svg", "records_a.csv", "records_b.csv", "run_manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let one = dir.path().join("one");
    ok(&[
        "sweep",
        "--checkpoint",
        p(&ckpt),
        "--corpus",
        p(&data.join("eval.jsonl")),
        "--taus",
        "0.5",
        "--out",
        p(&one),
    ]);
    assert_eq!(
        std::fs::read_to_string(one.join("sweep.csv")).unwrap().lines().count(),
        2
    );
    let bad = run(&[
        "sweep",
        "--checkpoint",
        p(&ckpt),
        "--corpus",
        p(&data.join("eval.jsonl")),
        "--taus",
        "",
        "--out",
        p(&one),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn text_init_regime_pretrains_its_own_tower() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--config", p(&fixture("tiny_synth.toml")), "--out", p(&data)]);
    let out = dir.path().join("m");
    ok(&[
        "train",
        "--corpus",
        p(&data.join("corpus.jsonl")),
        "--config",
        p(&fixture("tiny_train.toml")),
        "--out",
        p(&out),
        "--regime",
        "text-init-v-then-vl",
        "--epochs",
        "1",
    ]);
    for f in ["model.ckpt", "loss_log.csv", "text_pretrain.ckpt", "text_loss_log.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(out.join("loss_log.csv")).unwrap();
    assert!(log.lines().nth(1).unwrap().starts_with("v,"));
    let again = dir.path().join("m2");
    ok(&[
        "train",
        "--corpus",
        p(&data.join("corpus.jsonl")),
        "--config",
        p(&fixture("tiny_train.toml")),
        "--out",
        p(&again),
        "--regime",
        "text-init-vl",
        "--epochs",
        "1",
        "--text-init",
        p(&out.join("text_pretrain.ckpt")),
    ]);
    assert!(!again.join("text_pretrain.ckpt").exists());
}
