//! Cross-modal input ablation diagnostics for multimodal masked-prediction models.
//!
//! The crate measures how much a vision-and-language model recruits one
//! modality when predicting the other: inputs of one modality are ablated
//! (all of them, or only those aligned to a grounded phrase or object) and the
//! masked-prediction loss in the other modality is recorded.
//!
//! Modules, bottom-up:
//! - [`geometry`]: box overlap measures, co-mask sets, gold-to-proposal matching
//! - [`corpus`]: grounded image–caption data model, file format, LabelMatch
//! - [`synth`]: seeded synthetic corpus generator with a silver-label noise model
//! - [`model`]: desk-scale single- and dual-stream transformers, losses, gradients
//! - [`train`]: masking policies, pretraining regimes, Adam
//! - [`diagnose`]: vision-for-language and language-for-vision ablation runs
//! - [`analyze`]: aggregation, paired t-tests, confusion matrices, reports

pub mod analyze;
pub mod corpus;
pub mod diagnose;
pub mod geometry;
pub mod model;
pub mod synth;
#[cfg(test)]
mod testutil;
pub mod train;
