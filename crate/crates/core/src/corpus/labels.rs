//! LabelMatch subset construction and detector-versus-gold agreement.

use super::{to_datapoints, Corpus, CorpusError, DataPoint};
use crate::geometry::best_match;
use std::collections::BTreeMap;

/// A phrase's aligned gold box resolved to its best-matching proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetRegion {
    pub datapoint: DataPoint,
    pub gold_box: usize,
    pub region: usize,
}

/// Every (datapoint, aligned gold box) pair with the proposal chosen by [`best_match`].
pub fn target_regions(c: &Corpus) -> Vec<TargetRegion> {
    let mut out = Vec::new();
    for dp in to_datapoints(c) {
        let (ex, ph) = dp.resolve(c).expect("datapoints come from this corpus");
        let boxes = ex.boxes();
        for (g, gold) in ph.aligned_gold_boxes.iter().enumerate() {
            // validated examples always have at least one region
            let region = best_match(gold, &boxes).expect("non-empty regions");
            out.push(TargetRegion {
                datapoint: dp,
                gold_box: g,
                region,
            });
        }
    }
    out
}

/// Keeps the phrases whose head noun exactly names a class (ASCII case-folded)
/// and records that class as the gold label of each best-matching region.
///
/// Examples left without phrases are dropped.
pub fn label_match_subset(c: &Corpus) -> Result<Corpus, CorpusError> {
    let h = c.header();
    let label_index: BTreeMap<String, usize> = h
        .class_labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.to_lowercase(), i))
        .collect();
    let mut examples = Vec::new();
    for (e, ex) in c.examples().iter().enumerate() {
        let mut kept = ex.clone();
        kept.sentence.phrases.clear();
        let boxes = ex.boxes();
        for (p, ph) in ex.sentence.phrases.iter().enumerate() {
            let noun = ph
                .head_noun
                .ok_or(CorpusError::MissingHeadNoun { example: e, phrase: p })?;
            let Some(&class) = label_index.get(&h.vocabulary[noun].to_lowercase()) else {
                continue;
            };
            for gold in &ph.aligned_gold_boxes {
                let r = best_match(gold, &boxes).expect("non-empty regions");
                kept.regions[r].gold_class = Some(class);
            }
            kept.sentence.phrases.push(ph.clone());
        }
        if !kept.sentence.phrases.is_empty() {
            examples.push(kept);
        }
    }
    Corpus::new(h.clone(), examples)
}

/// For each `k`, the fraction of target regions whose gold class is among the
/// `k` most probable silver classes (ties ordered by class index).
pub fn agreement_stats(c: &Corpus, ks: &[usize]) -> Result<BTreeMap<usize, f64>, CorpusError> {
    let targets = target_regions(c);
    if targets.is_empty() {
        return Err(CorpusError::NoGoldLabels);
    }
    let mut ranks = Vec::with_capacity(targets.len());
    for t in &targets {
        let region = &c.examples()[t.datapoint.example].regions[t.region];
        let gold = region.gold_class.ok_or(CorpusError::MissingGold {
            example: t.datapoint.example,
            region: t.region,
        })?;
        ranks.push(rank_of(&region.silver_distribution, gold));
    }
    let n = ranks.len() as f64;
    Ok(ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r < k).count() as f64 / n))
        .collect())
}

/// 0-based position of `class` when classes are sorted by probability
/// descending, then index ascending.
fn rank_of(p: &[f64], class: usize) -> usize {
    let pc = p[class];
    p.iter()
        .enumerate()
        .filter(|&(i, &v)| v > pc || (v == pc && i < class))
        .count()
}
