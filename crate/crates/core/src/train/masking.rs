use crate::corpus::GroundedExample;
use crate::geometry::{comask_set, OverlapPolicy};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

const MASK_SHARE: f64 = 0.8;
const RANDOM_SHARE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingPolicy {
    pub token_mask_rate: f64,
    pub region_mask_rate: f64,
    /// Expands each sampled region to its co-mask set.
    pub region_comask: OverlapPolicy,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        Self {
            token_mask_rate: 0.15,
            region_mask_rate: 0.15,
            region_comask: OverlapPolicy::pretraining_default(),
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<(), String> {
        for (name, r) in [
            ("token_mask_rate", self.token_mask_rate),
            ("region_mask_rate", self.region_mask_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(format!("{name} {r} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// What a selected token position is replaced with; the original stays the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenTreatment {
    Mask,
    Random(usize),
    Keep,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainingMasks {
    /// (caption position, treatment), ascending by position.
    pub tokens: Vec<(usize, TokenTreatment)>,
    /// Regions replaced by zeros and scored.
    pub regions: BTreeSet<usize>,
}

/// Selects each token independently at `token_mask_rate` with an 80/10/10
/// mask/random/keep treatment, and each region at `region_mask_rate`; every
/// selected region pulls in its co-mask set.
pub fn sample_training_masks(
    ex: &GroundedExample,
    policy: &MaskingPolicy,
    vocab_size: usize,
    rng: &mut impl Rng,
) -> TrainingMasks {
    let mut out = TrainingMasks::default();
    for pos in 0..ex.sentence.tokens.len() {
        if !rng.random_bool(policy.token_mask_rate) {
            continue;
        }
        let u: f64 = rng.random();
        let t = if u < MASK_SHARE {
            TokenTreatment::Mask
        } else if u < MASK_SHARE + RANDOM_SHARE {
            TokenTreatment::Random(rng.random_range(0..vocab_size))
        } else {
            TokenTreatment::Keep
        };
        out.tokens.push((pos, t));
    }
    let boxes = ex.boxes();
    for (i, b) in boxes.iter().enumerate() {
        if rng.random_bool(policy.region_mask_rate) {
            out.regions.insert(i);
            out.regions.extend(comask_set(b, &boxes, &policy.region_comask));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::three_phrase_example;
    use crate::geometry::OverlapMeasure;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_rate_masks_nothing() {
        let (_, ex) = three_phrase_example();
        let p = MaskingPolicy {
            token_mask_rate: 0.0,
            region_mask_rate: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_training_masks(&ex, &p, 7, &mut rng), TrainingMasks::default());
        }
    }

    #[test]
    fn duplicate_boxes_are_always_comasked() {
        let (_, mut ex) = three_phrase_example();
        let dup = ex.regions[0].clone();
        ex.regions.push(dup);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for tau in [0.0, 0.3, 1.0] {
            let p = MaskingPolicy {
                token_mask_rate: 0.0,
                region_mask_rate: 0.5,
                region_comask: OverlapPolicy::new(OverlapMeasure::IoU, tau).unwrap(),
            };
            for _ in 0..200 {
                let m = sample_training_masks(&ex, &p, 7, &mut rng);
                assert_eq!(m.regions.contains(&0), m.regions.contains(&3), "tau {tau}");
            }
        }
    }

    #[test]
    fn empirical_rates_and_treatments() {
        let (_, mut ex) = three_phrase_example();
        ex.sentence.tokens = vec![3; 10];
        let p = MaskingPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut picked, mut masked, mut random) = (0usize, 0usize, 0usize);
        let n = 10_000;
        for _ in 0..n / 10 {
            for (_, t) in sample_training_masks(&ex, &p, 7, &mut rng).tokens {
                picked += 1;
                match t {
                    TokenTreatment::Mask => masked += 1,
                    TokenTreatment::Random(id) => {
                        assert!(id < 7);
                        random += 1
                    }
                    TokenTreatment::Keep => {}
                }
            }
        }
        let rate = picked as f64 / n as f64;
        assert!((rate - 0.15).abs() <= 0.01, "rate {rate}");
        let mshare = masked as f64 / picked as f64;
        let rshare = random as f64 / picked as f64;
        assert!((mshare - 0.8).abs() < 0.04, "{mshare}");
        assert!((rshare - 0.1).abs() < 0.03, "{rshare}");
    }
}
