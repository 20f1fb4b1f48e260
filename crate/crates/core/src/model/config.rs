use super::ModelError;
use crate::corpus::{Corpus, CorpusHeader};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Text and regions share every encoder block.
    SingleStream,
    /// Per-modality blocks, then co-attention blocks.
    DualStream,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::SingleStream => "single_stream",
            Architecture::DualStream => "dual_stream",
        })
    }
}

impl FromStr for Architecture {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "single_stream" => Ok(Architecture::SingleStream),
            "dual_stream" => Ok(Architecture::DualStream),
            _ => Err(format!("unknown architecture {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    #[serde(default)]
    pub vision_only_layers: usize,
    #[serde(default)]
    pub text_only_layers: usize,
    pub cross_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Feed-forward inner width.
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Includes the wrapping `[CLS]` and `[SEP]` positions.
    pub max_tokens: usize,
    pub max_regions: usize,
    pub use_box_embedding: bool,
    /// Vocabulary id embedded at masked and ablated token positions.
    pub mask_token: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.cross_layers == 0 {
            return bad("cross_layers must be at least 1".into());
        }
        if self.architecture == Architecture::SingleStream && (self.vision_only_layers > 0 || self.text_only_layers > 0)
        {
            return bad("single_stream has no per-modality layers".into());
        }
        for (name, v) in [
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("num_classes", self.num_classes),
            ("feature_dim", self.feature_dim),
            ("max_tokens", self.max_tokens),
            ("max_regions", self.max_regions),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.mask_token >= self.vocab_size {
            return bad(format!("mask_token {} outside vocabulary", self.mask_token));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Whether `name` belongs to the text tower copied by `init_from`.
    pub fn is_text_tower(&self, name: &str) -> bool {
        name.starts_with("text.") || name.starts_with("mlm.") || name.starts_with("enc.") || name.contains(".txt.")
    }

    /// Whether the model can consume `c`: matching vocabulary, classes, feature
    /// dimension and mask token, and every example within the length limits.
    /// An empty corpus is always compatible.
    pub fn check_corpus(&self, c: &Corpus) -> Result<(), String> {
        if c.is_empty() {
            return Ok(());
        }
        let h = c.header();
        for (what, model, corpus) in [
            ("vocabulary size", self.vocab_size, h.vocab_size),
            ("class count", self.num_classes, h.num_classes),
            ("feature dimension", self.feature_dim, h.feature_dim),
        ] {
            if model != corpus {
                return Err(format!("{what}: model {model}, corpus {corpus}"));
            }
        }
        let mask = h.special_tokens().map_err(|e| e.to_string())?.mask;
        if mask != self.mask_token {
            return Err(format!("mask token: model {}, corpus {mask}", self.mask_token));
        }
        for (i, ex) in c.examples().iter().enumerate() {
            if ex.sentence.tokens.len() + 2 > self.max_tokens {
                return Err(format!(
                    "example {i}: {} caption tokens plus [CLS]/[SEP] exceed max_tokens {}",
                    ex.sentence.tokens.len(),
                    self.max_tokens
                ));
            }
            if ex.regions.len() > self.max_regions {
                return Err(format!(
                    "example {i}: {} regions exceed max_regions {}",
                    ex.regions.len(),
                    self.max_regions
                ));
            }
        }
        Ok(())
    }

    /// Dimensions that must agree for losses to be comparable across models.
    pub fn loss_space(&self) -> (usize, usize, usize, usize) {
        (self.vocab_size, self.num_classes, self.max_tokens, self.max_regions)
    }
}

/// A [`ModelConfig`] without the corpus-determined sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub architecture: Architecture,
    #[serde(default)]
    pub vision_only_layers: usize,
    #[serde(default)]
    pub text_only_layers: usize,
    pub cross_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_tokens: usize,
    pub max_regions: usize,
    pub use_box_embedding: bool,
}

impl ModelShape {
    /// Fills vocabulary, class, feature and mask-token fields from `h`.
    pub fn for_corpus(&self, h: &CorpusHeader) -> Result<ModelConfig, ModelError> {
        let special = h.special_tokens().map_err(|e| ModelError::Config(e.to_string()))?;
        let cfg = ModelConfig {
            architecture: self.architecture,
            vision_only_layers: self.vision_only_layers,
            text_only_layers: self.text_only_layers,
            cross_layers: self.cross_layers,
            hidden: self.hidden,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            vocab_size: h.vocab_size,
            num_classes: h.num_classes,
            feature_dim: h.feature_dim,
            max_tokens: self.max_tokens,
            max_regions: self.max_regions,
            use_box_embedding: self.use_box_embedding,
            mask_token: special.mask,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
