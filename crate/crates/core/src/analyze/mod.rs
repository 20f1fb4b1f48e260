//! Aggregation, paired significance tests, silver-label confusion and reports.

mod report;
mod stats;

pub use report::{
    aggregate_svg, confusion_svg, emit_report, seed_svg, sweep_svg, write_aggregate_csv, write_column_sums_csv,
    write_confusion_csv, write_seed_csv, write_sweep_csv, Report, ReportFormat, SweepSeries,
};
pub use stats::{ln_beta, ln_gamma, regularized_incomplete_beta, student_t_two_sided};

use crate::corpus::{target_regions, Corpus, CorpusError};
use crate::diagnose::{Diagnostic, DiagnosticResult, SetupName};
use crate::geometry::OverlapMeasure;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error("nothing to analyze")]
    Empty,
    #[error("{0} results lack the none baseline")]
    MissingBaseline(Diagnostic),
    #[error("paired samples differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("a paired test needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("non-finite loss in paired samples")]
    NonFinite,
    #[error("class {0} has no category")]
    MissingCategory(usize),
    #[error("seed runs disagree on their rows")]
    SeedMismatch,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
}

/// Paired t-test on `a[i] − b[i]`, two-sided, `n − 1` degrees of freedom.
///
/// All-zero differences give `t = 0, p = 1`; constant nonzero differences
/// give an infinite `t` with `p = 0`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest, AnalyzeError> {
    if a.len() != b.len() {
        return Err(AnalyzeError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(AnalyzeError::TooFewPairs(n));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(AnalyzeError::NonFinite);
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, p: 1.0 }
        } else {
            TTest {
                t: f64::INFINITY.copysign(mean),
                p: 0.0,
            }
        });
    }
    let t = mean / (var / n as f64).sqrt();
    Ok(TTest {
        t,
        p: student_t_two_sided(t, (n - 1) as f64),
    })
}

/// Pairs two per-datapoint loss maps on their shared ids, in id order.
pub fn pair_by_id(a: &BTreeMap<&str, f64>, b: &BTreeMap<&str, f64>) -> (Vec<f64>, Vec<f64>) {
    a.iter().filter_map(|(id, x)| b.get(id).map(|y| (*x, *y))).unzip()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub diagnostic: Diagnostic,
    pub setup: SetupName,
    pub tau: Option<f64>,
    #[serde(skip)]
    pub measure: Option<OverlapMeasure>,
    pub mean_bits: f64,
    /// Sample standard deviation; 0 for a single datapoint.
    pub std: f64,
    pub n: usize,
    pub rel_change_pct: f64,
    /// Paired against None on shared datapoints; absent with fewer than 2 pairs.
    pub t_vs_none: Option<f64>,
    pub p_vs_none: Option<f64>,
}

/// `100 · (mean − baseline) / baseline`, 0 when both are 0.
pub fn relative_change_pct(mean: f64, baseline: f64) -> f64 {
    if mean == baseline {
        0.0
    } else {
        100.0 * (mean - baseline) / baseline
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

type GroupKey = (Diagnostic, SetupName, Option<u64>, Option<OverlapMeasure>);

/// Per (diagnostic, setup, τ) mean and spread, with change and paired test
/// against the diagnostic's None setup. Rows keep first-appearance order.
pub fn aggregate(r: &DiagnosticResult) -> Result<Vec<AggregateRecord>, AnalyzeError> {
    if r.is_empty() {
        return Err(AnalyzeError::Empty);
    }
    let mut order: Vec<GroupKey> = Vec::new();
    let mut groups: BTreeMap<GroupKey, BTreeMap<&str, f64>> = BTreeMap::new();
    for rec in &r.records {
        let key = (rec.diagnostic, rec.setup, rec.tau.map(f64::to_bits), rec.measure);
        groups
            .entry(key)
            .or_insert_with(|| {
                order.push(key);
                BTreeMap::new()
            })
            .insert(&rec.datapoint_id, rec.loss_bits);
    }
    let mut out = Vec::with_capacity(order.len());
    for key in order {
        let (diagnostic, setup, tau, measure) = key;
        let none = groups
            .get(&(diagnostic, SetupName::None, None, None))
            .ok_or(AnalyzeError::MissingBaseline(diagnostic))?;
        let this = &groups[&key];
        let values: Vec<f64> = this.values().copied().collect();
        let (mean, std) = mean_std(&values);
        let none_mean = mean_std(&none.values().copied().collect::<Vec<_>>()).0;
        let (a, b) = pair_by_id(this, none);
        let test = paired_ttest(&a, &b).ok();
        out.push(AggregateRecord {
            diagnostic,
            setup,
            tau: tau.map(f64::from_bits),
            measure,
            mean_bits: mean,
            std,
            n: values.len(),
            rel_change_pct: relative_change_pct(mean, none_mean),
            t_vs_none: test.map(|t| t.t),
            p_vs_none: test.map(|t| t.p),
        });
    }
    Ok(out)
}

/// One aggregate row summarized across seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSummary {
    pub diagnostic: Diagnostic,
    pub setup: SetupName,
    pub tau: Option<f64>,
    pub seeds: usize,
    pub mean_bits: f64,
    pub min_bits: f64,
    pub max_bits: f64,
    pub mean_rel_change_pct: f64,
    pub min_rel_change_pct: f64,
    pub max_rel_change_pct: f64,
}

/// Mean and range of per-seed aggregate means. Every run must carry the same rows.
pub fn aggregate_seeds(runs: &[Vec<AggregateRecord>]) -> Result<Vec<SeedSummary>, AnalyzeError> {
    let first = runs.first().ok_or(AnalyzeError::Empty)?;
    let key = |r: &AggregateRecord| (r.diagnostic, r.setup, r.tau.map(f64::to_bits), r.measure);
    for run in runs {
        if run.len() != first.len() || run.iter().zip(first).any(|(a, b)| key(a) != key(b)) {
            return Err(AnalyzeError::SeedMismatch);
        }
    }
    let k = runs.len() as f64;
    Ok((0..first.len())
        .map(|i| {
            let means: Vec<f64> = runs.iter().map(|r| r[i].mean_bits).collect();
            let rels: Vec<f64> = runs.iter().map(|r| r[i].rel_change_pct).collect();
            let lo = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            SeedSummary {
                diagnostic: first[i].diagnostic,
                setup: first[i].setup,
                tau: first[i].tau,
                seeds: runs.len(),
                mean_bits: means.iter().sum::<f64>() / k,
                min_bits: lo(&means),
                max_bits: hi(&means),
                mean_rel_change_pct: rels.iter().sum::<f64>() / k,
                min_rel_change_pct: lo(&rels),
                max_rel_change_pct: hi(&rels),
            }
        })
        .collect())
}

/// Incorrect top-1 silver predictions by (gold category, predicted category).
///
/// Proportions are over every target region, so the diagonal holds
/// within-category errors and the total mass is `1 − top-1 agreement`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub categories: Vec<String>,
    /// `counts[gold][pred]`.
    pub counts: Vec<Vec<usize>>,
    /// Number of target regions, correct ones included.
    pub total: usize,
}

impl ConfusionMatrix {
    pub fn proportion(&self, gold: usize, pred: usize) -> f64 {
        self.counts[gold][pred] as f64 / self.total as f64
    }

    pub fn mass(&self) -> f64 {
        self.counts.iter().flatten().sum::<usize>() as f64 / self.total as f64
    }

    /// Proportion of errors per predicted category.
    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.categories.len())
            .map(|p| (0..self.categories.len()).map(|g| self.proportion(g, p)).sum())
            .collect()
    }

    /// Nonzero counts keyed by category names.
    pub fn tally(&self) -> BTreeMap<(String, String), usize> {
        let mut out = BTreeMap::new();
        for (g, row) in self.counts.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                if n > 0 {
                    out.insert((self.categories[g].clone(), self.categories[p].clone()), n);
                }
            }
        }
        out
    }
}

/// Tabulates the silver argmax of every target region against its gold class.
pub fn confusion_matrix(c: &Corpus) -> Result<ConfusionMatrix, AnalyzeError> {
    let h = c.header();
    let categories = h.categories();
    let index: BTreeMap<&str, usize> = categories.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let category = |class: usize| {
        h.class_categories
            .get(&class)
            .map(|name| index[name.as_str()])
            .ok_or(AnalyzeError::MissingCategory(class))
    };
    let targets = target_regions(c);
    if targets.is_empty() {
        return Err(CorpusError::NoGoldLabels.into());
    }
    let k = categories.len();
    let mut counts = vec![vec![0; k]; k];
    for t in &targets {
        let region = &c.examples()[t.datapoint.example].regions[t.region];
        let gold = region.gold_class.ok_or(CorpusError::MissingGold {
            example: t.datapoint.example,
            region: t.region,
        })?;
        let pred = region.silver_argmax();
        if pred != gold {
            counts[category(gold)?][category(pred)?] += 1;
        }
    }
    Ok(ConfusionMatrix {
        categories,
        counts,
        total: targets.len(),
    })
}
