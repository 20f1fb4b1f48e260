use super::tensor::Matrix;
use crate::corpus::{GroundedExample, SpecialTokens};
use crate::geometry::BoundingBox;

/// Index of the first caption token once wrapped as `[CLS] … [SEP]`.
pub const CAPTION_OFFSET: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenSlot {
    Visible(usize),
    /// Prediction target; embeds the mask token.
    Mask,
    /// Removed as context; also embeds the mask token.
    Ablated,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RegionState {
    Visible(Vec<f64>),
    /// Prediction target; embeds the zero feature.
    Masked,
    /// Removed as context; embeds the provided mean feature.
    Ablated(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionSlot {
    pub bbox: BoundingBox,
    pub state: RegionState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub tokens: Vec<TokenSlot>,
    pub regions: Vec<RegionSlot>,
}

impl ModelInput {
    /// The example's caption wrapped in `[CLS] … [SEP]` with every region visible.
    pub fn from_example(ex: &GroundedExample, special: &SpecialTokens) -> Self {
        Self {
            tokens: wrap_caption(&ex.sentence.tokens, special),
            regions: ex
                .regions
                .iter()
                .map(|r| RegionSlot {
                    bbox: r.bbox,
                    state: RegionState::Visible(r.feature.clone()),
                })
                .collect(),
        }
    }

    pub fn visible_positions(&self) -> usize {
        self.tokens
            .iter()
            .filter(|t| matches!(t, TokenSlot::Visible(_)))
            .count()
            + self
                .regions
                .iter()
                .filter(|r| matches!(r.state, RegionState::Visible(_)))
                .count()
    }
}

pub fn wrap_caption(tokens: &[usize], special: &SpecialTokens) -> Vec<TokenSlot> {
    let mut out = Vec::with_capacity(tokens.len() + 2);
    out.push(TokenSlot::Visible(special.cls));
    out.extend(tokens.iter().map(|&t| TokenSlot::Visible(t)));
    out.push(TokenSlot::Visible(special.sep));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// One row per input token.
    pub token_logits: Matrix,
    /// One row per input region.
    pub region_logits: Matrix,
    pub itm_logit: f64,
}
