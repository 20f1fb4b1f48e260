//! Cross-modal input ablation.
//!
//! Vision-for-language (V4L) masks a phrase's tokens and scores their
//! prediction while regions are left alone, ablated where they overlap the
//! phrase's gold boxes, or ablated entirely. Language-for-vision (L4V) masks the
//! region best matching each gold box (plus its co-mask set) and scores its class
//! prediction while the caption is left alone, loses the phrase, or loses every
//! token.
//!
//! Prediction masking zeroes a region; ablation substitutes the mean region
//! feature of the evaluated corpus. A region that is both keeps the zeros.

use crate::corpus::{mean_region_feature, to_datapoints, Corpus, CorpusError, DataPoint, GroundedExample, Phrase};
use crate::geometry::{best_match, comask_set, GeometryError, OverlapMeasure, OverlapPolicy};
use crate::model::{
    mlm_loss, mrc_kl_loss, mrc_xe_loss, ModelConfig, ModelError, ModelInput, Predictor, RegionSlot, RegionState,
    TokenSlot, CAPTION_OFFSET,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiagnoseError {
    #[error("model and corpus are incompatible: {0}")]
    Incompatible(String),
    #[error("datapoint {datapoint}: {source}")]
    Model {
        datapoint: String,
        #[source]
        source: ModelError,
    },
    #[error("datapoint {0}: phrase span is empty")]
    EmptyPhrase(String),
    #[error("datapoint {datapoint}: target region {region} has no gold label (apply LabelMatch first)")]
    MissingGold { datapoint: String, region: usize },
    #[error("datapoint {0}: no region proposals")]
    NoProposals(String),
    #[error("invalid threshold sweep: {0}")]
    Sweep(String),
    #[error("duplicate setup {0}")]
    DuplicateSetup(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Diagnostic {
    #[serde(rename = "v4l")]
    V4L,
    #[serde(rename = "l4v")]
    L4V,
}

impl Diagnostic {
    pub fn as_str(self) -> &'static str {
        match self {
            Diagnostic::V4L => "v4l",
            Diagnostic::L4V => "l4v",
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Diagnostic {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "v4l" => Ok(Diagnostic::V4L),
            "l4v" => Ok(Diagnostic::L4V),
            _ => Err(format!("unknown diagnostic {s:?} (expected v4l or l4v)")),
        }
    }
}

/// Setup names across both diagnostics; `Object` is V4L only, `Phrase` L4V only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetupName {
    None,
    Object,
    Phrase,
    All,
}

impl SetupName {
    pub fn as_str(self) -> &'static str {
        match self {
            SetupName::None => "none",
            SetupName::Object => "object",
            SetupName::Phrase => "phrase",
            SetupName::All => "all",
        }
    }
}

impl fmt::Display for SetupName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SetupName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(SetupName::None),
            "object" => Ok(SetupName::Object),
            "phrase" => Ok(SetupName::Phrase),
            "all" => Ok(SetupName::All),
            _ => Err(format!("unknown setup {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum V4LKind {
    None,
    Object,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct V4LSetup {
    pub kind: V4LKind,
    /// Which regions count as overlapping a gold box under `Object`.
    pub object_comask: OverlapPolicy,
}

impl V4LSetup {
    pub fn new(kind: V4LKind) -> Self {
        Self {
            kind,
            object_comask: OverlapPolicy::ablation_default(),
        }
    }

    pub fn object(policy: OverlapPolicy) -> Self {
        Self {
            kind: V4LKind::Object,
            object_comask: policy,
        }
    }

    /// None, Object and All with the default overlap policy.
    pub fn standard() -> Vec<Self> {
        [V4LKind::None, V4LKind::Object, V4LKind::All].map(Self::new).to_vec()
    }

    pub fn name(&self) -> SetupName {
        match self.kind {
            V4LKind::None => SetupName::None,
            V4LKind::Object => SetupName::Object,
            V4LKind::All => SetupName::All,
        }
    }

    pub fn from_name(name: SetupName, policy: OverlapPolicy) -> Result<Self, String> {
        let kind = match name {
            SetupName::None => V4LKind::None,
            SetupName::Object => V4LKind::Object,
            SetupName::All => V4LKind::All,
            SetupName::Phrase => return Err("setup phrase belongs to l4v".into()),
        };
        Ok(Self {
            kind,
            object_comask: policy,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum L4VKind {
    None,
    Phrase,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllTextMode {
    /// Every caption token becomes a mask.
    #[default]
    MaskEach,
    /// The caption collapses to a single mask.
    SingleMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct L4VSetup {
    pub kind: L4VKind,
    pub all_text_mode: AllTextMode,
}

impl L4VSetup {
    pub fn new(kind: L4VKind) -> Self {
        Self {
            kind,
            all_text_mode: AllTextMode::MaskEach,
        }
    }

    pub fn standard() -> Vec<Self> {
        [L4VKind::None, L4VKind::Phrase, L4VKind::All].map(Self::new).to_vec()
    }

    pub fn name(&self) -> SetupName {
        match self.kind {
            L4VKind::None => SetupName::None,
            L4VKind::Phrase => SetupName::Phrase,
            L4VKind::All => SetupName::All,
        }
    }

    pub fn from_name(name: SetupName, mode: AllTextMode) -> Result<Self, String> {
        let kind = match name {
            SetupName::None => L4VKind::None,
            SetupName::Phrase => L4VKind::Phrase,
            SetupName::All => L4VKind::All,
            SetupName::Object => return Err("setup object belongs to v4l".into()),
        };
        Ok(Self {
            kind,
            all_text_mode: mode,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// KL divergence against the silver distribution.
    SilverKl,
    /// Unweighted cross-entropy of the gold class.
    GoldXe,
}

/// Policy used to expand an L4V target region into its prediction-masked set.
pub fn l4v_target_policy() -> OverlapPolicy {
    OverlapPolicy::ablation_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    pub datapoint_id: String,
    pub diagnostic: Diagnostic,
    pub setup: SetupName,
    /// Set on V4L Object rows.
    pub tau: Option<f64>,
    pub measure: Option<OverlapMeasure>,
    pub loss_bits: f64,
    /// L4V targets, one per aligned gold box, joined by `;`.
    pub target_region: Option<String>,
    /// V4L only.
    pub num_ablated: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiagnosticResult {
    pub records: Vec<DiagnosticRecord>,
}

impl DiagnosticResult {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    /// Losses of one setup keyed by datapoint id.
    pub fn losses(&self, diagnostic: Diagnostic, setup: SetupName, tau: Option<f64>) -> BTreeMap<&str, f64> {
        self.records
            .iter()
            .filter(|r| r.diagnostic == diagnostic && r.setup == setup && (tau.is_none() || r.tau == tau))
            .map(|r| (r.datapoint_id.as_str(), r.loss_bits))
            .collect()
    }

    pub fn mean(&self, diagnostic: Diagnostic, setup: SetupName, tau: Option<f64>) -> Option<f64> {
        let l = self.losses(diagnostic, setup, tau);
        (!l.is_empty()).then(|| l.values().sum::<f64>() / l.len() as f64)
    }

    pub fn extend(&mut self, other: DiagnosticResult) {
        self.records.extend(other.records);
    }

    pub fn write_csv(&self, w: impl Write) -> Result<(), DiagnoseError> {
        let mut wr = csv::Writer::from_writer(w);
        if self.records.is_empty() {
            wr.write_record(CSV_COLUMNS)?;
        }
        for r in &self.records {
            wr.serialize(r)?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv(r: impl Read) -> Result<Self, DiagnoseError> {
        let mut rd = csv::Reader::from_reader(r);
        let records = rd.deserialize().collect::<Result<Vec<DiagnosticRecord>, _>>()?;
        Ok(Self { records })
    }
}

pub const CSV_COLUMNS: [&str; 8] = [
    "datapoint_id",
    "diagnostic",
    "setup",
    "tau",
    "measure",
    "loss_bits",
    "target_region",
    "num_ablated",
];

fn visible_regions(ex: &GroundedExample) -> Vec<RegionSlot> {
    ex.regions
        .iter()
        .map(|r| RegionSlot {
            bbox: r.bbox,
            state: RegionState::Visible(r.feature.clone()),
        })
        .collect()
}

fn caption_slots(ex: &GroundedExample, cls: usize, sep: usize) -> Vec<TokenSlot> {
    let mut t = Vec::with_capacity(ex.sentence.tokens.len() + 2);
    t.push(TokenSlot::Visible(cls));
    t.extend(ex.sentence.tokens.iter().map(|&id| TokenSlot::Visible(id)));
    t.push(TokenSlot::Visible(sep));
    t
}

/// Token ids of `[CLS]` and `[SEP]`.
#[derive(Debug, Clone, Copy)]
pub struct Wrap {
    pub cls: usize,
    pub sep: usize,
}

impl Wrap {
    pub fn of(c: &Corpus) -> Result<Self, CorpusError> {
        let s = c.header().special_tokens()?;
        Ok(Self { cls: s.cls, sep: s.sep })
    }
}

/// Regions ablated by a V4L setup for a phrase.
pub fn v4l_ablated_regions(ex: &GroundedExample, ph: &Phrase, setup: &V4LSetup) -> Vec<usize> {
    match setup.kind {
        V4LKind::None => Vec::new(),
        V4LKind::All => (0..ex.regions.len()).collect(),
        V4LKind::Object => (0..ex.regions.len())
            .filter(|&r| {
                ph.aligned_gold_boxes
                    .iter()
                    .any(|g| setup.object_comask.triggers(g, &ex.regions[r].bbox))
            })
            .collect(),
    }
}

/// Phrase tokens become prediction masks; regions follow the setup.
/// Returns the input and the ablated region indices.
pub fn build_v4l_input(
    ex: &GroundedExample,
    ph: &Phrase,
    setup: &V4LSetup,
    mean_feature: &[f64],
    wrap: Wrap,
) -> Result<(ModelInput, Vec<usize>), String> {
    if ph.is_empty() {
        return Err("phrase span is empty".into());
    }
    let mut tokens = caption_slots(ex, wrap.cls, wrap.sep);
    for pos in ph.span.0..ph.span.1 {
        tokens[pos + CAPTION_OFFSET] = TokenSlot::Mask;
    }
    let mut regions = visible_regions(ex);
    let ablated = v4l_ablated_regions(ex, ph, setup);
    for &r in &ablated {
        regions[r].state = RegionState::Ablated(mean_feature.to_vec());
    }
    Ok((ModelInput { tokens, regions }, ablated))
}

/// The region best matching `gold` plus its co-mask set.
pub fn l4v_masked_regions(
    ex: &GroundedExample,
    gold: &crate::geometry::BoundingBox,
) -> Result<(usize, Vec<usize>), GeometryError> {
    let boxes = ex.boxes();
    let target = best_match(gold, &boxes)?;
    let mut masked = comask_set(&boxes[target], &boxes, &l4v_target_policy());
    masked.insert(target);
    Ok((target, masked.into_iter().collect()))
}

/// The region best matching aligned box `gold_index` and its co-mask set
/// become prediction masks; caption tokens follow the setup.
/// Returns the input and the target region.
pub fn build_l4v_input(
    ex: &GroundedExample,
    ph: &Phrase,
    gold_index: usize,
    setup: &L4VSetup,
    wrap: Wrap,
) -> Result<(ModelInput, usize), GeometryError> {
    let (target, masked) = l4v_masked_regions(ex, &ph.aligned_gold_boxes[gold_index])?;
    let mut regions = visible_regions(ex);
    for r in masked {
        regions[r].state = RegionState::Masked;
    }
    let mut tokens = caption_slots(ex, wrap.cls, wrap.sep);
    match (setup.kind, setup.all_text_mode) {
        (L4VKind::None, _) => {}
        (L4VKind::Phrase, _) => {
            for pos in ph.span.0..ph.span.1 {
                tokens[pos + CAPTION_OFFSET] = TokenSlot::Ablated;
            }
        }
        (L4VKind::All, AllTextMode::MaskEach) => {
            let n = tokens.len();
            for t in &mut tokens[CAPTION_OFFSET..n - 1] {
                *t = TokenSlot::Ablated;
            }
        }
        (L4VKind::All, AllTextMode::SingleMask) => {
            tokens = vec![
                TokenSlot::Visible(wrap.cls),
                TokenSlot::Ablated,
                TokenSlot::Visible(wrap.sep),
            ];
        }
    }
    Ok((ModelInput { tokens, regions }, target))
}

fn check_compatible(model: &impl Predictor, c: &Corpus) -> Result<(), DiagnoseError> {
    model.config().check_corpus(c).map_err(DiagnoseError::Incompatible)
}

/// Losses of two models are comparable only when vocabulary, classes and
/// length limits agree.
pub fn check_comparable(a: &ModelConfig, b: &ModelConfig) -> Result<(), DiagnoseError> {
    if a.loss_space() == b.loss_space() {
        Ok(())
    } else {
        Err(DiagnoseError::Incompatible(format!(
            "(V, C, T, K) differ: {:?} vs {:?}",
            a.loss_space(),
            b.loss_space()
        )))
    }
}

fn distinct<T: PartialEq + Copy>(
    names: impl Iterator<Item = T>,
    show: impl Fn(T) -> String,
) -> Result<(), DiagnoseError> {
    let mut seen = Vec::new();
    for n in names {
        if seen.contains(&n) {
            return Err(DiagnoseError::DuplicateSetup(show(n)));
        }
        seen.push(n);
    }
    Ok(())
}

/// Runs `f` on every datapoint in parallel and concatenates the records in datapoint order.
fn per_datapoint<F>(c: &Corpus, f: F) -> Result<DiagnosticResult, DiagnoseError>
where
    F: Fn(DataPoint, &GroundedExample, &Phrase) -> Result<Vec<DiagnosticRecord>, DiagnoseError> + Sync,
{
    let dps = to_datapoints(c);
    let per: Vec<_> = dps
        .par_iter()
        .map(|dp| {
            let (ex, ph) = dp.resolve(c).expect("datapoints come from this corpus");
            f(*dp, ex, ph)
        })
        .collect();
    let mut records = Vec::new();
    for r in per {
        records.extend(r?);
    }
    Ok(DiagnosticResult { records })
}

/// Phrase-token MLM bits per datapoint and setup.
pub fn evaluate_v4l(
    model: &impl Predictor,
    c: &Corpus,
    setups: &[V4LSetup],
) -> Result<DiagnosticResult, DiagnoseError> {
    if c.is_empty() {
        return Ok(DiagnosticResult::default());
    }
    check_compatible(model, c)?;
    distinct(
        setups.iter().map(|s| {
            (
                s.name(),
                s.object_comask.measure(),
                s.object_comask.threshold().to_bits(),
            )
        }),
        |n| n.0.to_string(),
    )?;
    let mean = mean_region_feature(c)?;
    let wrap = Wrap::of(c)?;
    per_datapoint(c, |dp, ex, ph| {
        let id = dp.id();
        let positions: Vec<usize> = (ph.span.0..ph.span.1).map(|p| p + CAPTION_OFFSET).collect();
        let truth = &ex.sentence.tokens[ph.span.0..ph.span.1];
        setups
            .iter()
            .map(|s| {
                let (input, ablated) =
                    build_v4l_input(ex, ph, s, &mean, wrap).map_err(|_| DiagnoseError::EmptyPhrase(id.clone()))?;
                let model_err = |e| DiagnoseError::Model {
                    datapoint: id.clone(),
                    source: e,
                };
                let out = model.forward(&input).map_err(model_err)?;
                let loss = mlm_loss(&out, &positions, truth).map_err(model_err)?;
                let object = s.kind == V4LKind::Object;
                Ok(DiagnosticRecord {
                    datapoint_id: id.clone(),
                    diagnostic: Diagnostic::V4L,
                    setup: s.name(),
                    tau: object.then(|| s.object_comask.threshold()),
                    measure: object.then(|| s.object_comask.measure()),
                    loss_bits: loss,
                    target_region: None,
                    num_ablated: Some(ablated.len()),
                })
            })
            .collect()
    })
}

/// Target-region bits per datapoint and setup, averaged over the phrase's gold boxes.
pub fn evaluate_l4v(
    model: &impl Predictor,
    c: &Corpus,
    setups: &[L4VSetup],
    target: TargetMode,
) -> Result<DiagnosticResult, DiagnoseError> {
    if c.is_empty() {
        return Ok(DiagnosticResult::default());
    }
    check_compatible(model, c)?;
    distinct(setups.iter().map(|s| s.name()), |n| n.to_string())?;
    let wrap = Wrap::of(c)?;
    per_datapoint(c, |dp, ex, ph| {
        let id = dp.id();
        if ex.regions.is_empty() {
            return Err(DiagnoseError::NoProposals(id));
        }
        setups
            .iter()
            .map(|s| {
                let mut total = 0.0;
                let mut targets = Vec::new();
                for g in 0..ph.aligned_gold_boxes.len() {
                    let (input, t) = build_l4v_input(ex, ph, g, s, wrap)?;
                    let model_err = |e| DiagnoseError::Model {
                        datapoint: id.clone(),
                        source: e,
                    };
                    let out = model.forward(&input).map_err(model_err)?;
                    let region = &ex.regions[t];
                    total += match target {
                        TargetMode::SilverKl => mrc_kl_loss(&out, t, &region.silver_distribution),
                        TargetMode::GoldXe => {
                            let gold = region.gold_class.ok_or_else(|| DiagnoseError::MissingGold {
                                datapoint: id.clone(),
                                region: t,
                            })?;
                            mrc_xe_loss(&out, t, gold, 1.0)
                        }
                    }
                    .map_err(model_err)?;
                    targets.push(t.to_string());
                }
                Ok(DiagnosticRecord {
                    datapoint_id: id.clone(),
                    diagnostic: Diagnostic::L4V,
                    setup: s.name(),
                    tau: None,
                    measure: None,
                    loss_bits: total / ph.aligned_gold_boxes.len() as f64,
                    target_region: Some(targets.join(";")),
                    num_ablated: None,
                })
            })
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub tau: f64,
    pub mean_bits: f64,
    pub mean_ablated: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub measure: OverlapMeasure,
    /// Ascending in `tau`.
    pub points: Vec<SweepPoint>,
    pub none_mean: f64,
    pub all_mean: f64,
    /// Every per-datapoint record, None and All included.
    pub records: DiagnosticResult,
}

/// V4L Object ablation re-run for each threshold, with None and All as references.
pub fn threshold_sweep(
    model: &impl Predictor,
    c: &Corpus,
    taus: &[f64],
    measure: OverlapMeasure,
) -> Result<SweepResult, DiagnoseError> {
    if taus.is_empty() {
        return Err(DiagnoseError::Sweep("no thresholds given".into()));
    }
    if c.is_empty() {
        return Err(DiagnoseError::Sweep("corpus has no datapoints".into()));
    }
    let mut sorted = taus.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut setups = vec![V4LSetup::new(V4LKind::None), V4LSetup::new(V4LKind::All)];
    for &t in &sorted {
        setups.push(V4LSetup::object(OverlapPolicy::new(measure, t)?));
    }
    let records = evaluate_v4l(model, c, &setups)?;
    let points = sorted
        .iter()
        .map(|&tau| {
            let rows: Vec<&DiagnosticRecord> = records
                .records
                .iter()
                .filter(|r| r.setup == SetupName::Object && r.tau == Some(tau))
                .collect();
            let n = rows.len() as f64;
            SweepPoint {
                tau,
                mean_bits: rows.iter().map(|r| r.loss_bits).sum::<f64>() / n,
                mean_ablated: rows.iter().map(|r| r.num_ablated.unwrap_or(0) as f64).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(SweepResult {
        measure,
        points,
        none_mean: records.mean(Diagnostic::V4L, SetupName::None, None).unwrap_or(f64::NAN),
        all_mean: records.mean(Diagnostic::V4L, SetupName::All, None).unwrap_or(f64::NAN),
        records,
    })
}

#[cfg(test)]
mod tests;
