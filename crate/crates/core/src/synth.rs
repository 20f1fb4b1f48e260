//! Seeded synthetic grounded corpora with a controllable silver-label noise model.
//!
//! Each image is a set of objects placed on a jittered grid. An object's main
//! proposal is its gold box; optional extra proposals are sub-boxes of the
//! object that carry a noisier copy of its visual feature, which is what makes
//! overlap thresholds matter. Captions are templates that mention 1–3 object
//! groups in reading order, so every phrase names its gold class.
//!
//! All randomness derives from one root seed through ChaCha8 streams, one
//! stream per concern (class embeddings, layout and captions, feature noise,
//! label noise, noun choice). Changing the noise model therefore leaves the
//! scenes, captions and features of a corpus untouched.

use crate::corpus::{
    Corpus, CorpusHeader, GroundedExample, Phrase, Region, Sentence, CLS_TOKEN, FORMAT_VERSION, MASK_TOKEN, SEP_TOKEN,
};
use crate::geometry::BoundingBox;
use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot place {objects} objects on a {grid}x{grid} grid")]
    Placement { objects: usize, grid: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    /// Canonical class word; doubles as the detector label.
    pub label: String,
    /// Synonym that never matches a detector label.
    pub alias: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub classes: Vec<ClassSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub taxonomy: Vec<CategorySpec>,
    /// Inclusive range of objects per image.
    pub num_objects: (usize, usize),
    /// Inclusive range of object groups mentioned per caption.
    pub mentions_per_caption: (usize, usize),
    pub feature_dim: usize,
    /// Standard deviation of the Gaussian noise added to an object's class embedding.
    pub feature_noise: f64,
    /// Fraction of embedding variance shared by all classes of a category.
    pub category_feature_share: f64,
    pub grid_size: usize,
    /// Sub-box proposals generated per object (overlap density).
    pub extra_proposals: usize,
    pub extra_feature_noise: f64,
    /// Probability that an object repeats the previous object's class, forming a
    /// multi-object phrase.
    pub multi_object_rate: f64,
    /// Probability that a phrase uses the class alias instead of its label.
    pub oov_noun_rate: f64,
    /// Write gold labels onto every region (otherwise only LabelMatch adds them).
    pub annotate_gold: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            taxonomy: default_taxonomy(),
            num_objects: (1, 3),
            mentions_per_caption: (1, 3),
            feature_dim: 16,
            feature_noise: 0.3,
            category_feature_share: 0.5,
            grid_size: 3,
            extra_proposals: 1,
            extra_feature_noise: 1.0,
            multi_object_rate: 0.0,
            oov_noun_rate: 0.0,
            annotate_gold: false,
        }
    }
}

impl SceneConfig {
    pub fn num_classes(&self) -> usize {
        self.taxonomy.iter().map(|c| c.classes.len()).sum()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: String| Err(SynthError::Config(m));
        if self.num_classes() < 2 {
            return err("need at least 2 classes".into());
        }
        if self.feature_dim < 4 {
            return err(format!("feature_dim {} < 4", self.feature_dim));
        }
        if !(self.feature_noise >= 0.0 && self.extra_feature_noise >= 0.0) {
            return err("feature noise must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.category_feature_share) {
            return err("category_feature_share outside [0, 1]".into());
        }
        for (name, p) in [
            ("multi_object_rate", self.multi_object_rate),
            ("oov_noun_rate", self.oov_noun_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("{name} outside [0, 1]"));
            }
        }
        let (lo, hi) = self.num_objects;
        if lo == 0 || lo > hi {
            return err(format!("bad num_objects range ({lo}, {hi})"));
        }
        let (mlo, mhi) = self.mentions_per_caption;
        if mlo == 0 || mlo > mhi {
            return err(format!("bad mentions_per_caption range ({mlo}, {mhi})"));
        }
        if self.grid_size == 0 || hi > self.grid_size * self.grid_size {
            return Err(SynthError::Placement {
                objects: hi,
                grid: self.grid_size,
            });
        }
        let mut words: Vec<&str> = TEMPLATE_WORDS.to_vec();
        for c in self.taxonomy.iter().flat_map(|c| &c.classes) {
            for w in [&c.label, &c.alias] {
                if w.is_empty() || w.contains(char::is_whitespace) {
                    return err(format!("class word `{w}` must be a single token"));
                }
                words.push(w);
            }
        }
        let n = words.len();
        words.sort_unstable();
        words.dedup();
        if words.len() != n {
            return err("class labels, aliases and template words must be distinct".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfusionKind {
    None,
    WithinCategory,
    Uniform,
}

/// How silver labels deviate from gold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub kind: ConfusionKind,
    /// Probability that the silver argmax differs from gold.
    pub rate: f64,
    /// Probability mass spread away from the silver argmax.
    pub smoothing: f64,
    /// Spread temperature: small values keep the smoothing mass inside the
    /// argmax's category, large values spread it uniformly.
    pub temperature: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            kind: ConfusionKind::None,
            rate: 0.0,
            smoothing: 0.2,
            temperature: 0.5,
        }
    }
}

impl NoiseModel {
    pub fn clean() -> Self {
        Self::default()
    }

    pub fn within_category(rate: f64) -> Self {
        Self {
            kind: ConfusionKind::WithinCategory,
            rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(SynthError::Config(format!("noise rate {} outside [0, 1]", self.rate)));
        }
        if !(0.0..0.5).contains(&self.smoothing) {
            return Err(SynthError::Config(format!(
                "smoothing {} outside [0, 0.5)",
                self.smoothing
            )));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(SynthError::Config("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

/// Class-id view of a taxonomy.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    category_of: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl Taxonomy {
    pub fn from_specs(specs: &[CategorySpec]) -> Self {
        let mut category_of = Vec::new();
        let mut members = Vec::new();
        for (k, cat) in specs.iter().enumerate() {
            let mut m = Vec::new();
            for _ in &cat.classes {
                m.push(category_of.len());
                category_of.push(k);
            }
            members.push(m);
        }
        Self { category_of, members }
    }

    /// Builds the view from a corpus header's class-to-category map; classes
    /// without an entry get singleton categories.
    pub fn from_header(h: &CorpusHeader) -> Self {
        let mut names: Vec<String> = h.categories();
        let mut category_of = Vec::with_capacity(h.num_classes);
        for c in 0..h.num_classes {
            let name = h.class_categories.get(&c).cloned().unwrap_or_else(|| format!("#{c}"));
            let k = match names.iter().position(|n| *n == name) {
                Some(k) => k,
                None => {
                    names.push(name);
                    names.len() - 1
                }
            };
            category_of.push(k);
        }
        let mut members = vec![Vec::new(); names.len()];
        for (c, &k) in category_of.iter().enumerate() {
            members[k].push(c);
        }
        Self { category_of, members }
    }

    pub fn num_classes(&self) -> usize {
        self.category_of.len()
    }

    pub fn category_of(&self, class: usize) -> usize {
        self.category_of[class]
    }

    pub fn members(&self, category: usize) -> &[usize] {
        &self.members[category]
    }
}

/// Draws the silver argmax for an object of class `gold`.
///
/// Returns `(class, corrupted)`. Under within-category confusion a gold class
/// alone in its category cannot be corrupted and comes back unchanged.
pub fn confusion_target(gold: usize, noise: &NoiseModel, taxonomy: &Taxonomy, rng: &mut impl Rng) -> (usize, bool) {
    if noise.kind == ConfusionKind::None || noise.rate == 0.0 {
        return (gold, false);
    }
    let candidates: Vec<usize> = match noise.kind {
        ConfusionKind::None => unreachable!(),
        ConfusionKind::Uniform => (0..taxonomy.num_classes()).filter(|&c| c != gold).collect(),
        ConfusionKind::WithinCategory => taxonomy
            .members(taxonomy.category_of(gold))
            .iter()
            .copied()
            .filter(|&c| c != gold)
            .collect(),
    };
    if !rng.random_bool(noise.rate) {
        return (gold, false);
    }
    if candidates.is_empty() {
        log::debug!("class {gold} has no confusable class; keeping gold");
        return (gold, false);
    }
    (candidates[rng.random_range(0..candidates.len())], true)
}

/// Silver distribution with mass `1 - smoothing` on `argmax`.
pub fn silver_distribution(argmax: usize, noise: &NoiseModel, taxonomy: &Taxonomy) -> Vec<f64> {
    let c = taxonomy.num_classes();
    let mut p = vec![0.0; c];
    if noise.smoothing == 0.0 {
        p[argmax] = 1.0;
        return p;
    }
    let cat = taxonomy.category_of(argmax);
    let same_cat_exists = taxonomy.members(cat).len() > 1;
    let weight = |k: usize| -> f64 {
        let far = taxonomy.category_of(k) != cat;
        if noise.temperature == 0.0 {
            if far && same_cat_exists {
                0.0
            } else {
                1.0
            }
        } else if far {
            (-1.0 / noise.temperature).exp()
        } else {
            1.0
        }
    };
    let total: f64 = (0..c).filter(|&k| k != argmax).map(weight).sum();
    for (k, pk) in p.iter_mut().enumerate() {
        if k != argmax {
            *pk = noise.smoothing * weight(k) / total;
        }
    }
    p[argmax] = 1.0 - noise.smoothing;
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub image_id: String,
    pub region_index: usize,
    pub gold: usize,
    pub silver_argmax: usize,
    pub corrupted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseRecord {
    pub example: usize,
    pub phrase: usize,
    pub head_noun: String,
    pub gold: usize,
    pub in_vocabulary: bool,
}

/// Ground truth written alongside a generated corpus.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GeneratorManifest {
    pub regions: Vec<RegionRecord>,
    pub phrases: Vec<PhraseRecord>,
}

impl GeneratorManifest {
    pub fn region(&self, image_id: &str, region_index: usize) -> Option<&RegionRecord> {
        self.regions
            .iter()
            .find(|r| r.image_id == image_id && r.region_index == region_index)
    }

    pub fn write_regions(&self, w: impl Write) -> Result<(), SynthError> {
        write_jsonl(&self.regions, w)
    }

    pub fn write_phrases(&self, w: impl Write) -> Result<(), SynthError> {
        write_jsonl(&self.phrases, w)
    }
}

fn write_jsonl<T: Serialize>(rows: &[T], mut w: impl Write) -> Result<(), SynthError> {
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Everything needed to reproduce one generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub noise: NoiseModel,
    pub num_images: usize,
    pub captions_per_image: usize,
    pub seed: u64,
    /// Trailing images reserved for evaluation by [`SynthConfig::generate_split`].
    #[serde(default)]
    pub held_out_images: usize,
}

impl SynthConfig {
    pub fn generate(&self) -> Result<(Corpus, GeneratorManifest), SynthError> {
        generate_corpus(
            &self.scene,
            &self.noise,
            self.num_images,
            self.captions_per_image,
            self.seed,
        )
    }

    /// The generated corpus as (training, held-out) parts sharing one world.
    pub fn generate_split(&self) -> Result<(Corpus, Corpus, GeneratorManifest), SynthError> {
        if self.held_out_images > self.num_images {
            return Err(SynthError::Config(format!(
                "held_out_images {} exceeds num_images {}",
                self.held_out_images, self.num_images
            )));
        }
        let (c, m) = self.generate()?;
        let (train, eval) = c.split_images(self.held_out_images);
        Ok((train, eval, m))
    }
}

const TEMPLATE_WORDS: &[&str] = &[
    "a", "photo", "of", "there", "is", "we", "see", "look", "at", "and", ".", "two", "three", "four", "many",
];
const PREFIXES: &[&[&str]] = &[&["a", "photo", "of"], &["there", "is"], &["we", "see"], &["look", "at"]];
const COUNT_WORDS: &[&str] = &["two", "three", "four"];

mod stream {
    pub const EMBEDDING: u64 = 1;
    pub const LAYOUT: u64 = 2;
    pub const FEATURE: u64 = 3;
    pub const LABEL: u64 = 4;
    pub const NOUN: u64 = 5;
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn gaussian(rng: &mut impl RngCore) -> f64 {
    StandardNormal.sample(rng)
}

/// Generates `num_images × captions_per_image` examples.
pub fn generate_corpus(
    cfg: &SceneConfig,
    noise: &NoiseModel,
    num_images: usize,
    captions_per_image: usize,
    seed: u64,
) -> Result<(Corpus, GeneratorManifest), SynthError> {
    cfg.validate()?;
    noise.validate()?;
    if captions_per_image == 0 && num_images > 0 {
        return Err(SynthError::Config("captions_per_image must be >= 1".into()));
    }
    let taxonomy = Taxonomy::from_specs(&cfg.taxonomy);
    let classes: Vec<&ClassSpec> = cfg.taxonomy.iter().flat_map(|c| &c.classes).collect();
    let c = classes.len();
    let d = cfg.feature_dim;

    let mut vocabulary: Vec<String> = ["[PAD]", CLS_TOKEN, SEP_TOKEN, MASK_TOKEN]
        .iter()
        .chain(TEMPLATE_WORDS)
        .map(|s| s.to_string())
        .collect();
    let label_tok: Vec<usize> = classes
        .iter()
        .map(|cl| {
            vocabulary.push(cl.label.clone());
            vocabulary.len() - 1
        })
        .collect();
    let alias_tok: Vec<usize> = classes
        .iter()
        .map(|cl| {
            vocabulary.push(cl.alias.clone());
            vocabulary.len() - 1
        })
        .collect();
    let tok = |w: &str| vocabulary.iter().position(|v| v == w).expect("template word");
    let and_tok = tok("and");
    let dot_tok = tok(".");
    let a_tok = tok("a");
    let prefixes: Vec<Vec<usize>> = PREFIXES.iter().map(|p| p.iter().map(|w| tok(w)).collect()).collect();
    let count_tok: Vec<usize> = COUNT_WORDS.iter().map(|w| tok(w)).collect();
    let many_tok = tok("many");

    let header = CorpusHeader {
        version: FORMAT_VERSION,
        feature_dim: d,
        num_classes: c,
        vocab_size: vocabulary.len(),
        class_labels: classes.iter().map(|cl| cl.label.clone()).collect(),
        class_categories: (0..c)
            .map(|k| (k, cfg.taxonomy[taxonomy.category_of(k)].name.clone()))
            .collect(),
        vocabulary: vocabulary.clone(),
    };

    // class embeddings: shared category direction plus a class-specific one
    let mut emb_rng = rng_for(seed, stream::EMBEDDING);
    let cat_emb: Vec<Vec<f64>> = (0..cfg.taxonomy.len())
        .map(|_| (0..d).map(|_| gaussian(&mut emb_rng)).collect())
        .collect();
    let share = cfg.category_feature_share;
    let class_emb: Vec<Vec<f64>> = (0..c)
        .map(|k| {
            let cat = &cat_emb[taxonomy.category_of(k)];
            (0..d)
                .map(|i| share.sqrt() * cat[i] + (1.0 - share).sqrt() * gaussian(&mut emb_rng))
                .collect()
        })
        .collect();

    let mut layout = rng_for(seed, stream::LAYOUT);
    let mut feat_rng = rng_for(seed, stream::FEATURE);
    let mut label_rng = rng_for(seed, stream::LABEL);
    let mut noun_rng = rng_for(seed, stream::NOUN);
    let g = cfg.grid_size;
    let cell = 1.0 / g as f64;

    let mut manifest = GeneratorManifest::default();
    let mut examples = Vec::with_capacity(num_images * captions_per_image);
    for img in 0..num_images {
        let image_id = format!("img{img:05}");
        let n = layout.random_range(cfg.num_objects.0..=cfg.num_objects.1);
        let mut cells = sample(&mut layout, g * g, n).into_vec();
        cells.sort_unstable();

        // objects and their groups (runs of repeated classes)
        let mut obj_class = Vec::with_capacity(n);
        let mut obj_box = Vec::with_capacity(n);
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (i, &cellno) in cells.iter().enumerate() {
            let repeat = i > 0 && cfg.multi_object_rate > 0.0 && layout.random_bool(cfg.multi_object_rate);
            let class = if repeat {
                obj_class[i - 1]
            } else {
                layout.random_range(0..c)
            };
            obj_class.push(class);
            if repeat {
                groups.last_mut().expect("i > 0").push(i);
            } else {
                groups.push(vec![i]);
            }
            let (row, col) = (cellno / g, cellno % g);
            let mut jit = || layout.random_range(0.0..0.2) * cell;
            let x1 = col as f64 * cell + jit();
            let x2 = (col + 1) as f64 * cell - jit();
            let y1 = row as f64 * cell + jit();
            let y2 = (row + 1) as f64 * cell - jit();
            obj_box.push(BoundingBox::new(x1, y1, x2.min(1.0), y2.min(1.0)).expect("jitter keeps boxes inside cells"));
        }

        // proposals: the object box itself, then sub-box parts
        let mut regions = Vec::new();
        for i in 0..n {
            let gold = obj_class[i];
            let (argmax, corrupted) = confusion_target(gold, noise, &taxonomy, &mut label_rng);
            let silver = silver_distribution(argmax, noise, &taxonomy);
            let mut push = |bbox: BoundingBox, sigma: f64, feat_rng: &mut ChaCha8Rng| {
                let feature = class_emb[gold].iter().map(|e| e + sigma * gaussian(feat_rng)).collect();
                manifest.regions.push(RegionRecord {
                    image_id: image_id.clone(),
                    region_index: regions.len(),
                    gold,
                    silver_argmax: argmax,
                    corrupted,
                });
                regions.push(Region {
                    bbox,
                    feature,
                    silver_distribution: silver.clone(),
                    gold_class: cfg.annotate_gold.then_some(gold),
                });
            };
            push(obj_box[i], cfg.feature_noise, &mut feat_rng);
            for _ in 0..cfg.extra_proposals {
                let b = obj_box[i];
                let fw = layout.random_range(0.3..0.95);
                let fh = layout.random_range(0.3..0.95);
                let w = b.width() * fw;
                let h = b.height() * fh;
                let x1 = b.x1() + layout.random_range(0.0..1.0) * (b.width() - w);
                let y1 = b.y1() + layout.random_range(0.0..1.0) * (b.height() - h);
                let part = BoundingBox::new(x1, y1, (x1 + w).min(b.x2()), (y1 + h).min(b.y2()))
                    .expect("sub-box of a valid box");
                push(part, cfg.extra_feature_noise, &mut feat_rng);
            }
        }

        for _ in 0..captions_per_image {
            let example = examples.len();
            let m = layout
                .random_range(cfg.mentions_per_caption.0..=cfg.mentions_per_caption.1)
                .min(groups.len());
            let mut chosen = sample(&mut layout, groups.len(), m).into_vec();
            chosen.sort_unstable();
            let mut tokens = prefixes[layout.random_range(0..prefixes.len())].clone();
            let mut phrases = Vec::with_capacity(m);
            for (j, &gi) in chosen.iter().enumerate() {
                if j > 0 {
                    tokens.push(and_tok);
                }
                let group = &groups[gi];
                let class = obj_class[group[0]];
                let det = match group.len() {
                    1 => a_tok,
                    k if k - 2 < count_tok.len() => count_tok[k - 2],
                    _ => many_tok,
                };
                let in_vocab = !(cfg.oov_noun_rate > 0.0 && noun_rng.random_bool(cfg.oov_noun_rate));
                let noun = if in_vocab { label_tok[class] } else { alias_tok[class] };
                let start = tokens.len();
                tokens.push(det);
                tokens.push(noun);
                manifest.phrases.push(PhraseRecord {
                    example,
                    phrase: j,
                    head_noun: vocabulary[noun].clone(),
                    gold: class,
                    in_vocabulary: in_vocab,
                });
                phrases.push(Phrase {
                    span: (start, start + 2),
                    aligned_gold_boxes: group.iter().map(|&o| obj_box[o]).collect(),
                    head_noun: Some(noun),
                });
            }
            tokens.push(dot_tok);
            examples.push(GroundedExample {
                image_id: image_id.clone(),
                regions: regions.clone(),
                sentence: Sentence { tokens, phrases },
            });
        }
    }
    let corpus = Corpus::new(header, examples).map_err(|e| SynthError::Config(format!("generator bug: {e}")))?;
    Ok((corpus, manifest))
}

/// Four categories of four everyday classes each.
pub fn default_taxonomy() -> Vec<CategorySpec> {
    let cat = |name: &str, words: &[(&str, &str)]| CategorySpec {
        name: name.into(),
        classes: words
            .iter()
            .map(|(l, a)| ClassSpec {
                label: l.to_string(),
                alias: a.to_string(),
            })
            .collect(),
    };
    vec![
        cat(
            "people",
            &[("man", "guy"), ("woman", "lady"), ("boy", "lad"), ("girl", "lass")],
        ),
        cat(
            "animals",
            &[
                ("dog", "puppy"),
                ("cat", "kitty"),
                ("horse", "pony"),
                ("bird", "sparrow"),
            ],
        ),
        cat(
            "vehicles",
            &[
                ("car", "sedan"),
                ("bus", "coach"),
                ("bike", "bicycle"),
                ("boat", "ship"),
            ],
        ),
        cat(
            "clothing",
            &[
                ("shirt", "blouse"),
                ("hat", "cap"),
                ("jacket", "coat"),
                ("shoe", "boot"),
            ],
        ),
    ]
}

/// Counts of (gold category, silver category) over the target regions of
/// `corpus`, taken from the manifest. Only corrupted regions are tallied.
pub fn manifest_confusion_tally(
    corpus: &Corpus,
    manifest: &GeneratorManifest,
) -> Option<BTreeMap<(String, String), usize>> {
    let h = corpus.header();
    let index: BTreeMap<(&str, usize), &RegionRecord> = manifest
        .regions
        .iter()
        .map(|r| ((r.image_id.as_str(), r.region_index), r))
        .collect();
    let mut tally = BTreeMap::new();
    for t in crate::corpus::target_regions(corpus) {
        let ex = &corpus.examples()[t.datapoint.example];
        let rec = index.get(&(ex.image_id.as_str(), t.region))?;
        if rec.corrupted {
            let key = (
                h.class_categories.get(&rec.gold)?.clone(),
                h.class_categories.get(&rec.silver_argmax)?.clone(),
            );
            *tally.entry(key).or_insert(0) += 1;
        }
    }
    Some(tally)
}
