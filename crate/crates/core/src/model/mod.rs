//! A small multimodal transformer with masked-token, masked-region and
//! image–text matching heads, its losses in bits, and exact gradients.

mod checkpoint;
mod config;
mod input;
mod network;
mod params;
pub mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Architecture, ModelConfig, ModelShape};
pub use input::{wrap_caption, ModelInput, ModelOutput, RegionSlot, RegionState, TokenSlot, CAPTION_OFFSET};
pub use params::{Gradients, ParamStore};
pub use tensor::Matrix;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::LN_2;
use std::path::Path;
use tape::{log_softmax, SoftTarget, Tape};
use thiserror::Error;

const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid model input: {0}")]
    Input(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("no masked positions")]
    EmptyMask,
    #[error("{0}")]
    InvalidTarget(String),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("checkpoint lacks parameter {0}")]
    MissingParameter(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Anything that maps a [`ModelInput`] to logits; lets diagnostics run on stubs.
pub trait Predictor: Sync {
    fn config(&self) -> &ModelConfig;
    fn forward(&self, input: &ModelInput) -> Result<ModelOutput, ModelError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalModel {
    config: ModelConfig,
    params: ParamStore,
}

/// Deterministic initialization; text-tower parameters are then copied from
/// `init_from` when given.
pub fn init_model(cfg: &ModelConfig, seed: u64, init_from: Option<&Checkpoint>) -> Result<MultimodalModel, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = network::initialize(cfg, &mut rng);
    if let Some(ck) = init_from {
        for id in 0..params.len() {
            let name = params.name(id).to_string();
            if !cfg.is_text_tower(&name) {
                continue;
            }
            let src = ck
                .params
                .get(&name)
                .ok_or_else(|| ModelError::MissingParameter(name.clone()))?;
            let dst = params.value_mut(id);
            if src.shape() != dst.shape() {
                return Err(ModelError::ShapeMismatch {
                    name,
                    expected: dst.shape(),
                    found: src.shape(),
                });
            }
            *dst = src.clone();
        }
    }
    Ok(MultimodalModel {
        config: cfg.clone(),
        params,
    })
}

impl MultimodalModel {
    /// Requires every parameter of the config's layout with matching shapes.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, ModelError> {
        ck.config.validate()?;
        let layout = network::layout(&ck.config);
        if layout.len() != ck.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint has {} parameters, config needs {}",
                ck.params.len(),
                layout.len()
            )));
        }
        for (i, (name, r, c, _)) in layout.iter().enumerate() {
            if ck.params.name(i) != name {
                return Err(ModelError::MissingParameter(name.clone()));
            }
            let found = ck.params.value(i).shape();
            if found != (*r, *c) {
                return Err(ModelError::ShapeMismatch {
                    name: name.clone(),
                    expected: (*r, *c),
                    found,
                });
            }
        }
        if !ck.params.is_finite() {
            return Err(ModelError::NonFinite("checkpoint parameters"));
        }
        Ok(Self {
            config: ck.config,
            params: ck.params,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        self.checkpoint().save(path)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
        }
    }

    /// Only the text-tower parameters; usable as `init_from`.
    pub fn text_checkpoint(&self) -> Checkpoint {
        let mut params = ParamStore::new();
        for (name, m) in self.params.iter() {
            if self.config.is_text_tower(name) {
                params.push(name, m.clone());
            }
        }
        Checkpoint {
            config: self.config.clone(),
            params,
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn validate_input(&self, input: &ModelInput) -> Result<(), ModelError> {
        let c = &self.config;
        let bad = |m: String| Err(ModelError::Input(m));
        if input.tokens.is_empty() || input.tokens.len() > c.max_tokens {
            return bad(format!("{} tokens, limit {}", input.tokens.len(), c.max_tokens));
        }
        if input.regions.len() > c.max_regions {
            return bad(format!("{} regions, limit {}", input.regions.len(), c.max_regions));
        }
        for t in &input.tokens {
            if let TokenSlot::Visible(id) = t {
                if *id >= c.vocab_size {
                    return bad(format!("token id {id} outside vocabulary of {}", c.vocab_size));
                }
            }
        }
        for (i, r) in input.regions.iter().enumerate() {
            if let RegionState::Visible(f) | RegionState::Ablated(f) = &r.state {
                if f.len() != c.feature_dim {
                    return bad(format!("region {i} feature has dimension {}", f.len()));
                }
                if f.iter().any(|v| !v.is_finite()) {
                    return bad(format!("region {i} feature is not finite"));
                }
            }
        }
        if input.visible_positions() == 0 {
            return bad("no visible position".into());
        }
        Ok(())
    }

    /// Exact gradients of the selected, weighted loss; also returns each
    /// component's unweighted value in bits.
    pub fn gradients(&self, input: &ModelInput, sel: &LossSelection) -> Result<(LossBreakdown, Gradients), ModelError> {
        self.validate_input(input)?;
        let mut tape = Tape::new(&self.params);
        let heads = network::build(&mut tape, &self.config, input);
        let mut terms = Vec::new();
        let mut parts = LossBreakdown::default();

        if !sel.mlm.is_empty() {
            let v = self.config.vocab_size;
            let mut rows = Vec::with_capacity(sel.mlm.len());
            for &(pos, tok) in &sel.mlm {
                check_index("masked position", pos, input.tokens.len())?;
                check_index("true token", tok, v)?;
                rows.push(SoftTarget {
                    row: pos,
                    dist: one_hot(v, tok),
                    weight: 1.0,
                    kl: false,
                });
            }
            let l = tape.soft_target_loss(heads.token_logits, rows);
            parts.mlm = tape.value(l).get(0, 0);
            terms.push(tape.scale(l, sel.weights.mlm));
        }
        if !sel.mrc.is_empty() {
            let Some(logits) = heads.region_logits else {
                return Err(ModelError::InvalidTarget("region loss without regions".into()));
            };
            let c = self.config.num_classes;
            let mut rows = Vec::with_capacity(sel.mrc.len());
            for t in &sel.mrc {
                let region = t.region();
                check_index("target region", region, input.regions.len())?;
                rows.push(match t {
                    MrcTarget::Kl { dist, .. } => {
                        check_distribution(dist, c)?;
                        SoftTarget {
                            row: region,
                            dist: dist.clone(),
                            weight: 1.0,
                            kl: true,
                        }
                    }
                    MrcTarget::Xe { class, weight, .. } => {
                        check_index("class", *class, c)?;
                        check_weight(*weight)?;
                        SoftTarget {
                            row: region,
                            dist: one_hot(c, *class),
                            weight: *weight,
                            kl: false,
                        }
                    }
                });
            }
            let l = tape.soft_target_loss(logits, rows);
            parts.mrc = tape.value(l).get(0, 0);
            terms.push(tape.scale(l, sel.weights.mrc));
        }
        if let Some(matched) = sel.itm {
            let l = tape.bce(heads.itm_logit, matched, 1.0);
            parts.itm = tape.value(l).get(0, 0);
            terms.push(tape.scale(l, sel.weights.itm));
        }
        let Some(&first) = terms.first() else {
            return Ok((parts, Gradients::zeros_like(&self.params)));
        };
        let total = terms[1..].iter().fold(first, |acc, &t| tape.add(acc, t));
        parts.total = tape.value(total).get(0, 0);
        if !parts.total.is_finite() {
            return Err(ModelError::NonFinite("loss"));
        }
        let grads = tape.backward(total);
        if !grads.is_finite() {
            return Err(ModelError::NonFinite("gradients"));
        }
        Ok((parts, grads))
    }
}

impl Predictor for MultimodalModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn forward(&self, input: &ModelInput) -> Result<ModelOutput, ModelError> {
        self.validate_input(input)?;
        let mut tape = Tape::new(&self.params);
        let heads = network::build(&mut tape, &self.config, input);
        let out = ModelOutput {
            token_logits: tape.value(heads.token_logits).clone(),
            region_logits: match heads.region_logits {
                Some(v) => tape.value(v).clone(),
                None => Matrix::zeros(0, self.config.num_classes),
            },
            itm_logit: tape.value(heads.itm_logit).get(0, 0),
        };
        if !out.token_logits.is_finite() || !out.region_logits.is_finite() || !out.itm_logit.is_finite() {
            return Err(ModelError::NonFinite("activations"));
        }
        Ok(out)
    }
}

/// Emits the same logits for every position regardless of input.
#[derive(Debug, Clone)]
pub struct ConstantPredictor {
    pub config: ModelConfig,
    pub token_row: Vec<f64>,
    pub region_row: Vec<f64>,
    pub itm_logit: f64,
}

impl ConstantPredictor {
    /// All-zero logits, so every softmax is uniform.
    pub fn uniform(config: ModelConfig) -> Self {
        Self {
            token_row: vec![0.0; config.vocab_size],
            region_row: vec![0.0; config.num_classes],
            itm_logit: 0.0,
            config,
        }
    }
}

impl Predictor for ConstantPredictor {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn forward(&self, input: &ModelInput) -> Result<ModelOutput, ModelError> {
        let rows =
            |n: usize, r: &[f64]| Matrix::from_vec(n, r.len(), r.iter().copied().cycle().take(n * r.len()).collect());
        Ok(ModelOutput {
            token_logits: rows(input.tokens.len(), &self.token_row),
            region_logits: rows(input.regions.len(), &self.region_row),
            itm_logit: self.itm_logit,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MrcTarget {
    /// KL divergence from `dist` to the prediction.
    Kl { region: usize, dist: Vec<f64> },
    /// `weight` times the cross-entropy of `class`.
    Xe { region: usize, class: usize, weight: f64 },
}

impl MrcTarget {
    pub fn region(&self) -> usize {
        match self {
            MrcTarget::Kl { region, .. } | MrcTarget::Xe { region, .. } => *region,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub mlm: f64,
    pub mrc: f64,
    pub itm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mlm: 1.0,
            mrc: 1.0,
            itm: 1.0,
        }
    }
}

/// Which losses enter the differentiated total.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossSelection {
    /// (token position, true token id)
    pub mlm: Vec<(usize, usize)>,
    pub mrc: Vec<MrcTarget>,
    /// Match label for the image–text matching loss.
    pub itm: Option<bool>,
    pub weights: LossWeights,
}

/// Loss components in bits; `total` is the weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub mlm: f64,
    pub mrc: f64,
    pub itm: f64,
    pub total: f64,
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

fn check_index(what: &str, i: usize, len: usize) -> Result<(), ModelError> {
    if i < len {
        Ok(())
    } else {
        Err(ModelError::InvalidTarget(format!("{what} {i} out of range 0..{len}")))
    }
}

fn check_weight(w: f64) -> Result<(), ModelError> {
    if (0.0..=1.0).contains(&w) {
        Ok(())
    } else {
        Err(ModelError::InvalidTarget(format!("weight {w} outside [0, 1]")))
    }
}

fn check_distribution(p: &[f64], n: usize) -> Result<(), ModelError> {
    if p.len() != n {
        return Err(ModelError::InvalidTarget(format!(
            "distribution has {} entries, expected {n}",
            p.len()
        )));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(ModelError::InvalidTarget(
            "distribution has negative or non-finite entries".into(),
        ));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(ModelError::InvalidTarget(format!("distribution sums to {s}")));
    }
    Ok(())
}

fn log2_softmax_row(out: &Matrix, row: usize) -> Vec<f64> {
    log_softmax(out.row(row)).into_iter().map(|v| v / LN_2).collect()
}

/// Sum over `masked` positions of −log₂ P(true token).
pub fn mlm_loss(out: &ModelOutput, masked: &[usize], true_tokens: &[usize]) -> Result<f64, ModelError> {
    if masked.is_empty() {
        return Err(ModelError::EmptyMask);
    }
    if masked.len() != true_tokens.len() {
        return Err(ModelError::InvalidTarget(format!(
            "{} masked positions but {} true tokens",
            masked.len(),
            true_tokens.len()
        )));
    }
    let v = out.token_logits.cols();
    let mut total = 0.0;
    for (&pos, &tok) in masked.iter().zip(true_tokens) {
        check_index("masked position", pos, out.token_logits.rows())?;
        check_index("true token", tok, v)?;
        total -= log2_softmax_row(&out.token_logits, pos)[tok];
    }
    Ok(total.max(0.0))
}

/// KL(P_g ‖ prediction) in bits; zero entries of `p_g` contribute nothing.
pub fn mrc_kl_loss(out: &ModelOutput, region: usize, p_g: &[f64]) -> Result<f64, ModelError> {
    check_index("target region", region, out.region_logits.rows())?;
    check_distribution(p_g, out.region_logits.cols())?;
    let lq = log2_softmax_row(&out.region_logits, region);
    let kl: f64 = p_g
        .iter()
        .zip(&lq)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p.log2() - q))
        .sum();
    Ok(kl.max(0.0))
}

/// `weight` × −log₂ P(class).
pub fn mrc_xe_loss(out: &ModelOutput, region: usize, class: usize, weight: f64) -> Result<f64, ModelError> {
    check_index("target region", region, out.region_logits.rows())?;
    check_index("class", class, out.region_logits.cols())?;
    check_weight(weight)?;
    if weight == 0.0 {
        return Ok(0.0);
    }
    Ok((-weight * log2_softmax_row(&out.region_logits, region)[class]).max(0.0))
}

/// Binary cross-entropy in bits of the matching logit.
pub fn itm_loss(out: &ModelOutput, is_matched: bool) -> f64 {
    tape::bce_nats(out.itm_logit, is_matched) / LN_2
}

#[cfg(test)]
mod tests;
