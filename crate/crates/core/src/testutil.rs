//! Small corpora and models shared by unit tests.

use crate::corpus::Corpus;
use crate::model::{Architecture, ModelConfig, ModelShape};
use crate::synth::{generate_corpus, NoiseModel, SceneConfig};

pub fn small_corpus(images: usize, captions: usize, seed: u64) -> Corpus {
    let scene = SceneConfig {
        feature_dim: 6,
        ..SceneConfig::default()
    };
    generate_corpus(&scene, &NoiseModel::clean(), images, captions, seed)
        .unwrap()
        .0
}

pub fn small_shape(arch: Architecture) -> ModelShape {
    let dual = arch == Architecture::DualStream;
    ModelShape {
        architecture: arch,
        vision_only_layers: usize::from(dual),
        text_only_layers: usize::from(dual),
        cross_layers: 1,
        hidden: 16,
        heads: 2,
        ffn_dim: 32,
        max_tokens: 16,
        max_regions: 8,
        use_box_embedding: true,
    }
}

pub fn small_config(c: &Corpus, arch: Architecture) -> ModelConfig {
    small_shape(arch).for_corpus(c.header()).unwrap()
}
