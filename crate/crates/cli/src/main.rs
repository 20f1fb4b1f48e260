//! `xablate`: generate corpora, pretrain, run ablation diagnostics, analyze.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage, 3 training divergence,
//! 4 model/corpus incompatibility.

mod commands;
mod failure;
mod manifest;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use xablate::diagnose::{Diagnostic, SetupName};
use xablate::geometry::OverlapMeasure;
use xablate::train::{RegimeKind, VisionObjective};

#[derive(Debug, Parser)]
#[command(name = "xablate", version, about = "Cross-modal input ablation diagnostics")]
struct Cli {
    /// Cap on worker threads (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic grounded corpus from a TOML config.
    Synth(SynthArgs),
    /// Print corpus statistics as JSON.
    Stats(StatsArgs),
    /// Pretrain a model on a corpus.
    Train(TrainArgs),
    /// Run vision-for-language and/or language-for-vision ablations.
    Diagnose(DiagnoseArgs),
    /// Re-run Object ablation over overlap thresholds.
    Sweep(SweepArgs),
    /// Aggregate diagnostic results, compare seeds, tabulate silver-label confusion.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Synthesis config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the silver-label confusion rate.
    #[arg(long)]
    pub noise_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Restrict to LabelMatch phrases and add detector agreement.
    #[arg(long)]
    pub label_match: bool,
    /// Also write stats.json and a manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ObjectiveArg {
    MrcKl,
    MrcXeWeighted,
}

impl From<ObjectiveArg> for VisionObjective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::MrcKl => VisionObjective::MrcKl,
            ObjectiveArg::MrcXeWeighted => VisionObjective::MrcXeWeighted,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Training plan (TOML): regime, model shape, optimizer settings.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// One of text-init-vl, rnd-vl, rnd-v-then-vl, text-init-v-then-vl, text-only-mlm.
    #[arg(long)]
    pub regime: Option<RegimeKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub vision_epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long, value_enum)]
    pub vision_objective: Option<ObjectiveArg>,
    /// Text-tower checkpoint for text-initialized regimes; without it the
    /// tower is pretrained on this corpus's captions first.
    #[arg(long)]
    pub text_init: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TargetArg {
    /// KL divergence against the silver distribution.
    Silver,
    /// Cross-entropy of the gold class (needs gold labels, e.g. --label-match).
    Gold,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Diagnostics to run.
    #[arg(long, value_delimiter = ',', default_value = "v4l,l4v")]
    pub diagnostic: Vec<Diagnostic>,
    /// Setups among none, object (v4l), phrase (l4v), all (default: every
    /// setup of the selected diagnostics).
    #[arg(long, value_delimiter = ',')]
    pub setups: Vec<SetupName>,
    /// L4V scoring target.
    #[arg(long, value_enum, default_value = "silver")]
    pub target: TargetArg,
    /// Overlap threshold for V4L Object ablation.
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    /// Overlap measure for V4L Object ablation (iou or iot).
    #[arg(long, default_value = "iot")]
    pub measure: OverlapMeasure,
    /// Evaluate only phrases whose head noun names a class, with gold labels.
    #[arg(long)]
    pub label_match: bool,
    /// L4V All collapses the caption to one mask instead of masking each token.
    #[arg(long)]
    pub single_mask: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// One or more checkpoints, e.g. models pretrained at different thresholds.
    #[arg(long, required = true, num_args = 1..)]
    pub checkpoint: Vec<PathBuf>,
    /// Series labels, one per checkpoint (default: file stems).
    #[arg(long, value_delimiter = ',')]
    pub label: Vec<String>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Thresholds, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub taus: Vec<f64>,
    #[arg(long, default_value = "iot")]
    pub measure: OverlapMeasure,
    #[arg(long)]
    pub label_match: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Svg,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Result CSVs from `diagnose`; several are treated as seeds of one experiment.
    #[arg(long, num_args = 1..)]
    pub results: Vec<PathBuf>,
    /// Corpus for agreement and confusion tables.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Apply LabelMatch to the corpus first.
    #[arg(long)]
    pub label_match: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "csv,svg")]
    pub format: Vec<FormatArg>,
}

fn main() {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            std::process::exit(failure::EXIT_USAGE);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("thread pool is configured once");
    }
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Stats(a) => commands::stats(&a),
        Command::Train(a) => commands::train(&a),
        Command::Diagnose(a) => commands::diagnose(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Analyze(a) => commands::analyze(&a),
    };
    if let Err(f) = result {
        eprintln!("error: {f}");
        std::process::exit(f.code);
    }
}
