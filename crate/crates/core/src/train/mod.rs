//! Pretraining: masking, regimes, the Adam loop and loss logs.
//!
//! Within a batch, per-example gradients may be computed in parallel; they are
//! summed in batch order, so results do not depend on the worker count.

mod masking;
mod optim;

pub use masking::{sample_training_masks, MaskingPolicy, TokenTreatment, TrainingMasks};
pub use optim::{Adam, AdamConfig};

use crate::corpus::{Corpus, CorpusError, GroundedExample, SpecialTokens};
use crate::model::{
    init_model, wrap_caption, Checkpoint, Gradients, LossBreakdown, LossSelection, ModelConfig, ModelError, ModelInput,
    ModelShape, MrcTarget, MultimodalModel, Predictor, RegionSlot, RegionState, TokenSlot, CAPTION_OFFSET,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("model and corpus are incompatible: {0}")]
    Incompatible(String),
    #[error("training diverged at step {step}: {msg}")]
    Divergence { step: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeKind {
    /// Text tower from a text-only checkpoint, then full pretraining.
    TextInitVl,
    /// Random initialization, full pretraining.
    RndVl,
    /// Random initialization, region-only phase, then full pretraining.
    RndVThenVl,
    /// Text tower from a checkpoint, region-only phase, then full pretraining.
    TextInitVThenVl,
    /// Masked-token objective on captions alone.
    TextOnlyMlm,
}

impl RegimeKind {
    pub const ALL: [RegimeKind; 5] = [
        RegimeKind::TextInitVl,
        RegimeKind::RndVl,
        RegimeKind::RndVThenVl,
        RegimeKind::TextInitVThenVl,
        RegimeKind::TextOnlyMlm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RegimeKind::TextInitVl => "text-init-vl",
            RegimeKind::RndVl => "rnd-vl",
            RegimeKind::RndVThenVl => "rnd-v-then-vl",
            RegimeKind::TextInitVThenVl => "text-init-v-then-vl",
            RegimeKind::TextOnlyMlm => "text-only-mlm",
        }
    }

    pub fn needs_text_init(self) -> bool {
        matches!(self, RegimeKind::TextInitVl | RegimeKind::TextInitVThenVl)
    }
}

impl fmt::Display for RegimeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegimeKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        RegimeKind::ALL.into_iter().find(|k| k.as_str() == norm).ok_or_else(|| {
            let names: Vec<_> = RegimeKind::ALL.iter().map(|k| k.as_str()).collect();
            format!("unknown regime {s:?} (expected one of {})", names.join(", "))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseKind {
    /// Regions only; the caption is reduced to `[CLS] [SEP]`.
    Vision,
    VisionLanguage,
    /// Captions only; no regions.
    Text,
}

impl PhaseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PhaseKind::Vision => "v",
            PhaseKind::VisionLanguage => "vl",
            PhaseKind::Text => "text",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossSet {
    pub mlm: bool,
    pub mrc: bool,
    pub itm: bool,
}

impl LossSet {
    pub fn is_empty(&self) -> bool {
        !(self.mlm || self.mrc || self.itm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Phase {
    pub kind: PhaseKind,
    pub epochs: usize,
    pub losses: LossSet,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Regime {
    pub kind: RegimeKind,
    pub phases: Vec<Phase>,
}

impl Regime {
    pub fn new(kind: RegimeKind, vision_epochs: usize, epochs: usize) -> Self {
        let vision = Phase {
            kind: PhaseKind::Vision,
            epochs: vision_epochs,
            losses: LossSet {
                mlm: false,
                mrc: true,
                itm: false,
            },
        };
        let vl = Phase {
            kind: PhaseKind::VisionLanguage,
            epochs,
            losses: LossSet {
                mlm: true,
                mrc: true,
                itm: true,
            },
        };
        let text = Phase {
            kind: PhaseKind::Text,
            epochs,
            losses: LossSet {
                mlm: true,
                mrc: false,
                itm: false,
            },
        };
        let phases = match kind {
            RegimeKind::TextInitVl | RegimeKind::RndVl => vec![vl],
            RegimeKind::RndVThenVl | RegimeKind::TextInitVThenVl => vec![vision, vl],
            RegimeKind::TextOnlyMlm => vec![text],
        };
        Self { kind, phases }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self.phases.iter().find(|p| p.losses.is_empty()) {
            Some(p) => Err(format!("phase {} has no losses", p.kind.as_str())),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisionObjective {
    /// KL divergence against the silver distribution.
    MrcKl,
    /// Cross-entropy of the silver argmax, weighted by its probability.
    MrcXeWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epochs of the main phase.
    pub epochs: usize,
    /// Epochs of the region-only phase, for regimes that have one.
    pub vision_epochs: usize,
    pub vision_objective: VisionObjective,
    pub itm_negative_rate: f64,
    pub masking: MaskingPolicy,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 10,
            vision_epochs: 5,
            vision_objective: VisionObjective::MrcKl,
            itm_negative_rate: 0.5,
            masking: MaskingPolicy::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.itm_negative_rate) {
            return Err(format!("itm_negative_rate {} outside [0, 1]", self.itm_negative_rate));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.epsilon <= 0.0 {
            return Err("adam betas must lie in [0, 1) and epsilon be positive".into());
        }
        self.masking.validate()
    }

    pub fn regime(&self, kind: RegimeKind) -> Regime {
        Regime::new(kind, self.vision_epochs, self.epochs)
    }
}

/// Mean per-example losses over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub phase: String,
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub mlm_bits: f64,
    pub mrc_bits: f64,
    pub itm_bits: f64,
    pub total: f64,
}

pub fn write_loss_log(log: &[LossRecord], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "phase,epoch,step,mlm_bits,mrc_bits,itm_bits,total")?;
    for r in log {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.phase, r.epoch, r.step, r.mlm_bits, r.mrc_bits, r.itm_bits, r.total
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MultimodalModel,
    pub log: Vec<LossRecord>,
}

/// Initializes a model for `regime`; text-initialized regimes require `text_init`.
pub fn prepare_model(
    cfg: &ModelConfig,
    regime: RegimeKind,
    seed: u64,
    text_init: Option<&Checkpoint>,
) -> Result<MultimodalModel, TrainError> {
    match (regime.needs_text_init(), text_init) {
        (true, None) => Err(TrainError::Config(format!("regime {regime} needs a text checkpoint"))),
        (false, Some(_)) => Err(TrainError::Config(format!(
            "regime {regime} starts from random weights"
        ))),
        (_, init) => Ok(init_model(cfg, seed, init)?),
    }
}

/// A batch element: the input plus the losses scored on it.
type Job = (ModelInput, LossSelection);

struct Sampler<'a> {
    corpus: &'a Corpus,
    cfg: &'a TrainConfig,
    special: SpecialTokens,
    vocab_size: usize,
    distinct_images: bool,
}

impl Sampler<'_> {
    fn job(&self, e: usize, phase: &Phase, rng: &mut ChaCha8Rng) -> Job {
        let ex = &self.corpus.examples()[e];
        let masks = sample_training_masks(ex, &self.cfg.masking, self.vocab_size, rng);
        let mut sel = LossSelection::default();
        match phase.kind {
            PhaseKind::VisionLanguage => {
                if phase.losses.itm && self.distinct_images && rng.random_bool(self.cfg.itm_negative_rate) {
                    let other = self.negative_partner(ex, rng);
                    let input = ModelInput {
                        tokens: wrap_caption(&ex.sentence.tokens, &self.special),
                        regions: visible_regions(other),
                    };
                    sel.itm = Some(false);
                    return (input, sel);
                }
                let tokens = self.masked_tokens(ex, &masks, phase.losses.mlm, &mut sel);
                let regions = self.masked_regions(ex, &masks, phase.losses.mrc, &mut sel);
                if phase.losses.itm {
                    sel.itm = Some(true);
                }
                (ModelInput { tokens, regions }, sel)
            }
            PhaseKind::Vision => {
                let tokens = vec![
                    TokenSlot::Visible(self.special.cls),
                    TokenSlot::Visible(self.special.sep),
                ];
                let regions = self.masked_regions(ex, &masks, phase.losses.mrc, &mut sel);
                (ModelInput { tokens, regions }, sel)
            }
            PhaseKind::Text => {
                let tokens = self.masked_tokens(ex, &masks, phase.losses.mlm, &mut sel);
                (
                    ModelInput {
                        tokens,
                        regions: Vec::new(),
                    },
                    sel,
                )
            }
        }
    }

    fn negative_partner<'c>(&'c self, ex: &GroundedExample, rng: &mut ChaCha8Rng) -> &'c GroundedExample {
        let all = self.corpus.examples();
        loop {
            let cand = &all[rng.random_range(0..all.len())];
            if cand.image_id != ex.image_id {
                return cand;
            }
        }
    }

    fn masked_tokens(
        &self,
        ex: &GroundedExample,
        masks: &TrainingMasks,
        score: bool,
        sel: &mut LossSelection,
    ) -> Vec<TokenSlot> {
        let mut tokens = wrap_caption(&ex.sentence.tokens, &self.special);
        for &(pos, t) in &masks.tokens {
            let slot = pos + CAPTION_OFFSET;
            tokens[slot] = match t {
                TokenTreatment::Mask => TokenSlot::Mask,
                TokenTreatment::Random(id) => TokenSlot::Visible(id),
                TokenTreatment::Keep => tokens[slot],
            };
            if score {
                sel.mlm.push((slot, ex.sentence.tokens[pos]));
            }
        }
        tokens
    }

    fn masked_regions(
        &self,
        ex: &GroundedExample,
        masks: &TrainingMasks,
        score: bool,
        sel: &mut LossSelection,
    ) -> Vec<RegionSlot> {
        let mut regions = visible_regions(ex);
        for &r in &masks.regions {
            regions[r].state = RegionState::Masked;
            if score {
                let silver = &ex.regions[r].silver_distribution;
                sel.mrc.push(match self.cfg.vision_objective {
                    VisionObjective::MrcKl => MrcTarget::Kl {
                        region: r,
                        dist: silver.clone(),
                    },
                    VisionObjective::MrcXeWeighted => {
                        let class = ex.regions[r].silver_argmax();
                        MrcTarget::Xe {
                            region: r,
                            class,
                            weight: silver[class],
                        }
                    }
                });
            }
        }
        regions
    }
}

fn visible_regions(ex: &GroundedExample) -> Vec<RegionSlot> {
    ex.regions
        .iter()
        .map(|r| RegionSlot {
            bbox: r.bbox,
            state: RegionState::Visible(r.feature.clone()),
        })
        .collect()
}

/// Runs the regime's phases in order and logs mean losses per epoch.
pub fn train(
    mut model: MultimodalModel,
    corpus: &Corpus,
    regime: &Regime,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    regime.validate().map_err(TrainError::Config)?;
    model.config().check_corpus(corpus).map_err(TrainError::Incompatible)?;
    let total_epochs: usize = regime.phases.iter().map(|p| p.epochs).sum();
    if total_epochs == 0 || corpus.is_empty() {
        return Ok(TrainOutcome { model, log: Vec::new() });
    }
    let first_image = &corpus.examples()[0].image_id;
    let sampler = Sampler {
        corpus,
        cfg,
        special: corpus.header().special_tokens()?,
        vocab_size: corpus.header().vocab_size,
        distinct_images: corpus.examples().iter().any(|e| &e.image_id != first_image),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params(), cfg.learning_rate, cfg.adam);
    let mut step = 0;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for phase in &regime.phases {
        for epoch in 1..=phase.epochs {
            order.shuffle(&mut rng);
            let mut sum = LossBreakdown::default();
            for batch in order.chunks(cfg.batch_size) {
                let jobs: Vec<Job> = batch.iter().map(|&e| sampler.job(e, phase, &mut rng)).collect();
                let (parts, grads) = batch_gradients(&model, &jobs).map_err(|e| divergence(e, step))?;
                if !parts.total.is_finite() {
                    return Err(TrainError::Divergence {
                        step,
                        msg: "non-finite loss".into(),
                    });
                }
                sum.mlm += parts.mlm;
                sum.mrc += parts.mrc;
                sum.itm += parts.itm;
                sum.total += parts.total;
                adam.update(model.params_mut(), &grads);
                step += 1;
                if !model.params().is_finite() {
                    return Err(TrainError::Divergence {
                        step,
                        msg: "non-finite parameters".into(),
                    });
                }
            }
            let n = corpus.len() as f64;
            let rec = LossRecord {
                phase: phase.kind.as_str().to_string(),
                epoch,
                step,
                mlm_bits: sum.mlm / n,
                mrc_bits: sum.mrc / n,
                itm_bits: sum.itm / n,
                total: sum.total / n,
            };
            log::info!(
                "{} epoch {epoch}: total {:.4} bits (mlm {:.4}, mrc {:.4}, itm {:.4})",
                rec.phase,
                rec.total,
                rec.mlm_bits,
                rec.mrc_bits,
                rec.itm_bits
            );
            log.push(rec);
        }
    }
    Ok(TrainOutcome { model, log })
}

fn divergence(e: ModelError, step: usize) -> TrainError {
    match e {
        ModelError::NonFinite(what) => TrainError::Divergence {
            step,
            msg: format!("non-finite {what}"),
        },
        other => TrainError::Model(other),
    }
}

/// Summed losses and mean gradients over the batch; the reduction runs in batch order.
fn batch_gradients(model: &MultimodalModel, jobs: &[Job]) -> Result<(LossBreakdown, Gradients), ModelError> {
    let results: Vec<_> = jobs
        .par_iter()
        .map(|(input, sel)| model.gradients(input, sel))
        .collect();
    let mut grads = Gradients::zeros_like(model.params());
    let mut sum = LossBreakdown::default();
    for r in results {
        let (parts, g) = r?;
        sum.mlm += parts.mlm;
        sum.mrc += parts.mrc;
        sum.itm += parts.itm;
        sum.total += parts.total;
        grads.add_assign(&g);
    }
    grads.scale(1.0 / jobs.len() as f64);
    Ok((sum, grads))
}

/// Trains a fresh model on captions alone and returns its text-tower checkpoint.
pub fn text_only_pretrain(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, Vec<LossRecord>), TrainError> {
    let model = init_model(model_cfg, cfg.seed, None)?;
    let out = train(model, corpus, &cfg.regime(RegimeKind::TextOnlyMlm), cfg)?;
    Ok((out.model.text_checkpoint(), out.log))
}

/// A regime, model shape and optimizer settings: a training run minus its data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub regime: RegimeKind,
    pub model: ModelShape,
    #[serde(default)]
    pub train: TrainConfig,
}

/// A finished plan: the model plus the logs of every phase run.
#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub model: MultimodalModel,
    pub log: Vec<LossRecord>,
    /// Present when the plan pretrained its own text tower.
    pub text_checkpoint: Option<Checkpoint>,
    pub text_log: Vec<LossRecord>,
}

impl TrainPlan {
    /// Trains on `corpus`. A text-initialized regime without `text_init` first
    /// pretrains the text tower on the same captions with the same settings.
    pub fn run(&self, corpus: &Corpus, text_init: Option<&Checkpoint>) -> Result<PlanOutcome, TrainError> {
        self.train.validate().map_err(TrainError::Config)?;
        let cfg = self.model.for_corpus(corpus.header())?;
        let (own, text_log) = match (self.regime.needs_text_init(), text_init) {
            (true, None) => {
                let (ck, log) = text_only_pretrain(corpus, &cfg, &self.train)?;
                (Some(ck), log)
            }
            _ => (None, Vec::new()),
        };
        let init = text_init.or(own.as_ref());
        let model = prepare_model(&cfg, self.regime, self.train.seed, init)?;
        let out = train(model, corpus, &self.train.regime(self.regime), &self.train)?;
        Ok(PlanOutcome {
            model: out.model,
            log: out.log,
            text_checkpoint: own,
            text_log,
        })
    }
}

/// Mean bits per masked token when captions are scored without any regions.
/// Masked positions are drawn from `seed` at the policy's token rate, with at
/// least one per caption.
pub fn caption_mlm_bits(
    model: &impl Predictor,
    corpus: &Corpus,
    token_mask_rate: f64,
    seed: u64,
) -> Result<f64, TrainError> {
    let special = corpus.header().special_tokens()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut bits, mut count) = (0.0, 0usize);
    for ex in corpus.examples() {
        let toks = &ex.sentence.tokens;
        if toks.is_empty() {
            continue;
        }
        let mut picked: Vec<usize> = (0..toks.len()).filter(|_| rng.random_bool(token_mask_rate)).collect();
        if picked.is_empty() {
            picked.push(rng.random_range(0..toks.len()));
        }
        let mut slots = wrap_caption(toks, &special);
        for &p in &picked {
            slots[p + CAPTION_OFFSET] = TokenSlot::Mask;
        }
        let out = model.forward(&ModelInput {
            tokens: slots,
            regions: Vec::new(),
        })?;
        let positions: Vec<usize> = picked.iter().map(|p| p + CAPTION_OFFSET).collect();
        let truth: Vec<usize> = picked.iter().map(|&p| toks[p]).collect();
        bits += crate::model::mlm_loss(&out, &positions, &truth)?;
        count += picked.len();
    }
    if count == 0 {
        return Err(TrainError::Corpus(CorpusError::Empty));
    }
    Ok(bits / count as f64)
}
