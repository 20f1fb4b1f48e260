//! Grounded image–caption corpora.
//!
//! A corpus is a header (dimensions, class labels, category taxonomy,
//! vocabulary) plus a list of [`GroundedExample`]s. Each example pairs the
//! detected regions of one image with one caption whose phrases are linked to
//! gold boxes. One (example, phrase) pair is one [`DataPoint`]; phrases linked
//! to several gold objects still count once.

mod io;
mod labels;

pub use io::{load_corpus, read_corpus, save_corpus, write_corpus};
pub use labels::{agreement_stats, label_match_subset, target_regions, TargetRegion};

use crate::geometry::BoundingBox;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";
pub const MASK_TOKEN: &str = "[MASK]";

const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: {msg}")]
    Invalid { line: usize, msg: String },
    #[error("corpus is empty")]
    Empty,
    #[error("phrase {phrase} of example {example} has no head noun annotation")]
    MissingHeadNoun { example: usize, phrase: usize },
    #[error("corpus carries no gold labels")]
    NoGoldLabels,
    #[error("target region {region} of example {example} has no gold label")]
    MissingGold { example: usize, region: usize },
    #[error("class {0} has no category in the taxonomy")]
    MissingCategory(usize),
    #[error("vocabulary lacks special token {0}")]
    MissingSpecialToken(&'static str),
}

/// One detected region: geometry, visual feature and the detector's class distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub feature: Vec<f64>,
    #[serde(rename = "silver")]
    pub silver_distribution: Vec<f64>,
    #[serde(rename = "gold", default, skip_serializing_if = "Option::is_none")]
    pub gold_class: Option<usize>,
}

impl Region {
    pub fn silver_argmax(&self) -> usize {
        argmax(&self.silver_distribution)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phrase {
    /// Half-open token range `[start, end)`.
    pub span: (usize, usize),
    #[serde(rename = "boxes")]
    pub aligned_gold_boxes: Vec<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_noun: Option<usize>,
}

impl Phrase {
    pub fn len(&self) -> usize {
        self.span.1 - self.span.0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<usize>,
    pub phrases: Vec<Phrase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedExample {
    pub image_id: String,
    pub regions: Vec<Region>,
    pub sentence: Sentence,
}

impl GroundedExample {
    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.regions.iter().map(|r| r.bbox).collect()
    }
}

/// Corpus-level metadata; the first record of a corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub version: u32,
    #[serde(rename = "D")]
    pub feature_dim: usize,
    #[serde(rename = "C")]
    pub num_classes: usize,
    #[serde(rename = "V")]
    pub vocab_size: usize,
    pub class_labels: Vec<String>,
    pub class_categories: BTreeMap<usize, String>,
    pub vocabulary: Vec<String>,
}

impl CorpusHeader {
    pub fn empty() -> Self {
        Self {
            version: FORMAT_VERSION,
            feature_dim: 0,
            num_classes: 0,
            vocab_size: 0,
            class_labels: Vec::new(),
            class_categories: BTreeMap::new(),
            vocabulary: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.version != FORMAT_VERSION {
            return Err(format!("unsupported corpus version {}", self.version));
        }
        if self.class_labels.len() != self.num_classes {
            return Err(format!(
                "{} class labels for C = {}",
                self.class_labels.len(),
                self.num_classes
            ));
        }
        if self.vocabulary.len() != self.vocab_size {
            return Err(format!(
                "{} vocabulary entries for V = {}",
                self.vocabulary.len(),
                self.vocab_size
            ));
        }
        if let Some(c) = self.class_categories.keys().find(|&&c| c >= self.num_classes) {
            return Err(format!("category entry for unknown class {c}"));
        }
        if self.vocab_size > 0 {
            for tok in [CLS_TOKEN, SEP_TOKEN, MASK_TOKEN] {
                if !self.vocabulary.iter().any(|w| w == tok) {
                    return Err(format!("vocabulary lacks special token {tok}"));
                }
            }
        }
        Ok(())
    }

    pub fn token_id(&self, word: &str) -> Option<usize> {
        self.vocabulary.iter().position(|w| w == word)
    }

    pub fn special_tokens(&self) -> Result<SpecialTokens, CorpusError> {
        let find = |t: &'static str| self.token_id(t).ok_or(CorpusError::MissingSpecialToken(t));
        Ok(SpecialTokens {
            cls: find(CLS_TOKEN)?,
            sep: find(SEP_TOKEN)?,
            mask: find(MASK_TOKEN)?,
        })
    }

    /// Category names in sorted order.
    pub fn categories(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.class_categories.values().collect();
        set.into_iter().cloned().collect()
    }

    /// Validates one example against the header dimensions.
    pub fn validate_example(&self, ex: &GroundedExample) -> Result<(), String> {
        if ex.regions.is_empty() {
            return Err("example has no regions".into());
        }
        for (i, r) in ex.regions.iter().enumerate() {
            if r.feature.len() != self.feature_dim {
                return Err(format!(
                    "region {i}: feature dimension {} != D = {}",
                    r.feature.len(),
                    self.feature_dim
                ));
            }
            if r.feature.iter().any(|v| !v.is_finite()) {
                return Err(format!("region {i}: non-finite feature"));
            }
            if r.silver_distribution.len() != self.num_classes {
                return Err(format!(
                    "region {i}: silver distribution has {} entries, C = {}",
                    r.silver_distribution.len(),
                    self.num_classes
                ));
            }
            check_distribution(&r.silver_distribution).map_err(|e| format!("region {i}: {e}"))?;
            if let Some(g) = r.gold_class {
                if g >= self.num_classes {
                    return Err(format!("region {i}: gold class {g} out of range"));
                }
            }
        }
        let s = &ex.sentence;
        if let Some(t) = s.tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(format!("token id {t} out of vocabulary"));
        }
        let mut spans: Vec<(usize, usize)> = Vec::with_capacity(s.phrases.len());
        for (j, p) in s.phrases.iter().enumerate() {
            let (a, b) = p.span;
            if a >= b {
                return Err(format!("phrase {j}: empty span [{a}, {b})"));
            }
            if b > s.tokens.len() {
                return Err(format!("phrase {j}: span [{a}, {b}) exceeds {} tokens", s.tokens.len()));
            }
            if p.aligned_gold_boxes.is_empty() {
                return Err(format!("phrase {j}: no aligned gold box"));
            }
            if let Some(h) = p.head_noun {
                if h >= self.vocab_size {
                    return Err(format!("phrase {j}: head noun {h} out of vocabulary"));
                }
            }
            spans.push(p.span);
        }
        spans.sort_unstable();
        if spans.windows(2).any(|w| w[0].1 > w[1].0) {
            return Err("overlapping phrase spans".into());
        }
        Ok(())
    }
}

/// Checks non-negativity and unit sum within 1e-6.
pub fn check_distribution(p: &[f64]) -> Result<(), String> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err("distribution has a negative or non-finite entry".into());
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(format!("distribution sums to {s}"));
    }
    Ok(())
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub cls: usize,
    pub sep: usize,
    pub mask: usize,
}

/// A validated corpus. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    header: CorpusHeader,
    examples: Vec<GroundedExample>,
}

impl Corpus {
    pub fn new(header: CorpusHeader, examples: Vec<GroundedExample>) -> Result<Self, CorpusError> {
        header.validate().map_err(|msg| CorpusError::Invalid { line: 1, msg })?;
        for (i, ex) in examples.iter().enumerate() {
            header
                .validate_example(ex)
                .map_err(|msg| CorpusError::Invalid { line: i + 2, msg })?;
        }
        Ok(Self { header, examples })
    }

    pub fn empty(header: CorpusHeader) -> Self {
        Self {
            header,
            examples: Vec::new(),
        }
    }

    pub fn header(&self) -> &CorpusHeader {
        &self.header
    }

    pub fn examples(&self) -> &[GroundedExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn datapoint_count(&self) -> usize {
        self.examples.iter().map(|e| e.sentence.phrases.len()).sum()
    }

    /// Splits off the examples of the last `held_out` distinct images (in order
    /// of first appearance), so no image is shared between the two parts.
    pub fn split_images(&self, held_out: usize) -> (Corpus, Corpus) {
        let mut order: Vec<&str> = Vec::new();
        for ex in &self.examples {
            if !order.contains(&ex.image_id.as_str()) {
                order.push(&ex.image_id);
            }
        }
        let cut = order.len().saturating_sub(held_out);
        let eval: BTreeSet<&str> = order[cut..].iter().copied().collect();
        let (b, a): (Vec<GroundedExample>, Vec<GroundedExample>) = self
            .examples
            .iter()
            .cloned()
            .partition(|e| eval.contains(e.image_id.as_str()));
        let part = |examples| Corpus {
            header: self.header.clone(),
            examples,
        };
        (part(a), part(b))
    }
}

/// One phrase of one example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DataPoint {
    pub example: usize,
    pub phrase: usize,
}

impl DataPoint {
    pub fn id(&self) -> String {
        format!("{}:{}", self.example, self.phrase)
    }

    pub fn resolve<'c>(&self, corpus: &'c Corpus) -> Option<(&'c GroundedExample, &'c Phrase)> {
        let ex = corpus.examples().get(self.example)?;
        let ph = ex.sentence.phrases.get(self.phrase)?;
        Some((ex, ph))
    }
}

/// All datapoints in corpus order.
pub fn to_datapoints(c: &Corpus) -> Vec<DataPoint> {
    c.examples()
        .iter()
        .enumerate()
        .flat_map(|(e, ex)| (0..ex.sentence.phrases.len()).map(move |p| DataPoint { example: e, phrase: p }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsRecord {
    pub num_images: usize,
    pub num_sentences: usize,
    pub sentences_per_image: f64,
    pub mean_phrases_per_sentence: f64,
    pub mean_objects_per_phrase: f64,
    pub fraction_single_object_phrases: f64,
    pub num_datapoints: usize,
}

pub fn corpus_stats(c: &Corpus) -> StatsRecord {
    let images: BTreeSet<&str> = c.examples().iter().map(|e| e.image_id.as_str()).collect();
    let num_sentences = c.len();
    let phrases: Vec<&Phrase> = c.examples().iter().flat_map(|e| e.sentence.phrases.iter()).collect();
    let num_phrases = phrases.len();
    let objects: usize = phrases.iter().map(|p| p.aligned_gold_boxes.len()).sum();
    let single = phrases.iter().filter(|p| p.aligned_gold_boxes.len() == 1).count();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    StatsRecord {
        num_images: images.len(),
        num_sentences,
        sentences_per_image: ratio(num_sentences, images.len()),
        mean_phrases_per_sentence: ratio(num_phrases, num_sentences),
        mean_objects_per_phrase: ratio(objects, num_phrases),
        fraction_single_object_phrases: ratio(single, num_phrases),
        num_datapoints: num_phrases,
    }
}

/// Mean of every region feature over every example.
pub fn mean_region_feature(c: &Corpus) -> Result<Vec<f64>, CorpusError> {
    let mut sum = vec![0.0; c.header().feature_dim];
    let mut n = 0usize;
    for r in c.examples().iter().flat_map(|e| e.regions.iter()) {
        for (s, v) in sum.iter_mut().zip(&r.feature) {
            *s += v;
        }
        n += 1;
    }
    if n == 0 {
        return Err(CorpusError::Empty);
    }
    Ok(sum.into_iter().map(|s| s / n as f64).collect())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn header(d: usize, labels: &[&str]) -> CorpusHeader {
        let mut vocabulary: Vec<String> = vec![CLS_TOKEN.into(), SEP_TOKEN.into(), MASK_TOKEN.into(), "a".into()];
        vocabulary.extend(labels.iter().map(|s| s.to_string()));
        vocabulary.push("Unknown".into());
        CorpusHeader {
            version: FORMAT_VERSION,
            feature_dim: d,
            num_classes: labels.len(),
            vocab_size: vocabulary.len(),
            class_labels: labels.iter().map(|s| s.to_string()).collect(),
            class_categories: labels
                .iter()
                .enumerate()
                .map(|(i, _)| (i, "things".to_string()))
                .collect(),
            vocabulary,
        }
    }

    pub fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    pub fn one_hot(c: usize, k: usize) -> Vec<f64> {
        (0..c).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
    }

    pub fn region(bbox: BoundingBox, feature: Vec<f64>, silver: Vec<f64>) -> Region {
        Region {
            bbox,
            feature,
            silver_distribution: silver,
            gold_class: None,
        }
    }

    /// "a dog a cat a man" with three single-object phrases.
    pub fn three_phrase_example() -> (CorpusHeader, GroundedExample) {
        let h = header(2, &["dog", "cat", "man"]);
        let b0 = bx(0.0, 0.0, 0.3, 0.3);
        let b1 = bx(0.4, 0.4, 0.6, 0.6);
        let b2 = bx(0.7, 0.1, 0.9, 0.5);
        let ex = GroundedExample {
            image_id: "img0".into(),
            regions: vec![
                region(b0, vec![1.0, 0.0], one_hot(3, 0)),
                region(b1, vec![0.0, 1.0], one_hot(3, 1)),
                region(b2, vec![1.0, 1.0], one_hot(3, 2)),
            ],
            sentence: Sentence {
                tokens: vec![3, 4, 3, 5, 3, 6],
                phrases: vec![
                    Phrase {
                        span: (0, 2),
                        aligned_gold_boxes: vec![b0],
                        head_noun: Some(4),
                    },
                    Phrase {
                        span: (2, 4),
                        aligned_gold_boxes: vec![b1],
                        head_noun: Some(5),
                    },
                    Phrase {
                        span: (4, 6),
                        aligned_gold_boxes: vec![b2],
                        head_noun: Some(6),
                    },
                ],
            },
        };
        (h, ex)
    }

    #[test]
    fn image_split_keeps_images_whole() {
        let (h, ex) = three_phrase_example();
        let mut examples = Vec::new();
        for img in ["a", "b", "a", "c", "b"] {
            let mut e = ex.clone();
            e.image_id = img.into();
            examples.push(e);
        }
        let c = Corpus::new(h, examples).unwrap();
        let (train, eval) = c.split_images(2);
        let ids = |c: &Corpus| c.examples().iter().map(|e| e.image_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&train), vec!["a", "a"]);
        assert_eq!(ids(&eval), vec!["b", "c", "b"]);
        let (all, none) = c.split_images(0);
        assert_eq!((all.len(), none.len()), (5, 0));
        assert_eq!(c.split_images(9).0.len(), 0);
    }

    #[test]
    fn validation_rejects_bad_examples() {
        let (h, ex) = three_phrase_example();
        assert!(Corpus::new(h.clone(), vec![ex.clone()]).is_ok());

        let mut bad = ex.clone();
        bad.regions[0].feature.push(0.0);
        assert!(Corpus::new(h.clone(), vec![bad]).is_err());

        let mut bad = ex.clone();
        bad.regions[1].silver_distribution = vec![0.5, 0.4, 0.0];
        assert!(Corpus::new(h.clone(), vec![bad]).is_err());

        let mut bad = ex.clone();
        bad.sentence.phrases[1].span = (1, 3);
        assert!(Corpus::new(h.clone(), vec![bad]).is_err(), "overlapping spans");

        let mut bad = ex.clone();
        bad.sentence.phrases[2].span = (4, 7);
        assert!(Corpus::new(h.clone(), vec![bad]).is_err(), "span past end");

        let mut bad = ex.clone();
        bad.sentence.phrases[0].aligned_gold_boxes.clear();
        assert!(Corpus::new(h.clone(), vec![bad]).is_err());

        let mut bad = ex;
        bad.regions.clear();
        assert!(Corpus::new(h, vec![bad]).is_err());
    }

    #[test]
    fn datapoints_and_stats() {
        let (h, ex) = three_phrase_example();
        let c = Corpus::new(h.clone(), vec![ex]).unwrap();
        let dps = to_datapoints(&c);
        assert_eq!(dps.len(), 3);
        let s = corpus_stats(&c);
        assert_eq!(s.num_datapoints, 3);
        assert_eq!(s.num_images, 1);
        assert_eq!(s.mean_phrases_per_sentence, 3.0);
        assert_eq!(s.fraction_single_object_phrases, 1.0);

        let empty = Corpus::empty(h);
        assert!(to_datapoints(&empty).is_empty());
        let s = corpus_stats(&empty);
        assert_eq!(s.num_images, 0);
        assert_eq!(s.num_datapoints, 0);
        assert_eq!(s.mean_objects_per_phrase, 0.0);
    }

    #[test]
    fn mean_feature() {
        let (h, ex) = three_phrase_example();
        let c = Corpus::new(h.clone(), vec![ex]).unwrap();
        let m = mean_region_feature(&c).unwrap();
        assert!((m[0] - 2.0 / 3.0).abs() < 1e-15 && (m[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(
            mean_region_feature(&Corpus::empty(h)),
            Err(CorpusError::Empty)
        ));
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }
}
