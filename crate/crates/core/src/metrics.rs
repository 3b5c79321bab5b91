//! Per-slot accuracy summaries and scheme comparisons.
//!
//! Accuracies are fractions in [0, 1]. `delta` is the population variance of
//! the nine slot accuracies, in fraction² units; multiply by 10⁴ for
//! percentage-point² units.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numeric::{mean_and_variance, Matrix};
use crate::positions::Scheme;
use crate::probe::{ProbeDataset, GRID_SIDE, NUM_SLOTS};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const VARIANCE_CONVENTION: &str = "population";
/// Largest drop in mean Avg still counted as non-degraded (2 percentage points).
pub const AVG_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub positives: [usize; NUM_SLOTS],
    pub correct: [usize; NUM_SLOTS],
    pub negatives: usize,
    pub correct_negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionReport {
    pub schema_version: u32,
    pub scheme: Scheme,
    pub seed: u64,
    /// Accuracy on positives whose key sits at each slot.
    pub acc: [f64; NUM_SLOTS],
    /// Accuracy on all matched negatives.
    pub acc_neg: f64,
    pub avg: f64,
    pub delta: f64,
    /// Variance of `acc` with the n−1 denominator, for comparison only.
    pub delta_sample: f64,
    pub variance_convention: String,
    pub counts: SampleCounts,
    pub dataset_hash: String,
}

impl PositionReport {
    /// Builds a report from integer counts; every slot needs a positive.
    pub fn from_counts(scheme: Scheme, seed: u64, counts: SampleCounts, dataset_hash: &str) -> Result<Self> {
        if let Some(slot) = counts.positives.iter().position(|&n| n == 0) {
            return Err(Error::data(format!("no positive evaluation samples at slot {slot}")));
        }
        let mut acc = [0.0; NUM_SLOTS];
        for (a, (&c, &n)) in acc.iter_mut().zip(counts.correct.iter().zip(&counts.positives)) {
            *a = c as f64 / n as f64;
        }
        let acc_neg = if counts.negatives == 0 {
            0.0
        } else {
            counts.correct_negatives as f64 / counts.negatives as f64
        };
        let (avg, delta) = mean_and_variance(&acc);
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            scheme,
            seed,
            acc,
            acc_neg,
            avg,
            delta,
            delta_sample: delta * NUM_SLOTS as f64 / (NUM_SLOTS - 1) as f64,
            variance_convention: VARIANCE_CONVENTION.into(),
            counts,
            dataset_hash: dataset_hash.into(),
        })
    }

    pub fn avg_percent(&self) -> f64 {
        self.avg * 100.0
    }

    /// Δ in percentage-point² units.
    pub fn delta_percent_sq(&self) -> f64 {
        self.delta * 1e4
    }

    /// Accuracy over positives and negatives together.
    pub fn overall_accuracy(&self) -> f64 {
        let c = &self.counts;
        let correct = c.correct.iter().sum::<usize>() + c.correct_negatives;
        let total = c.positives.iter().sum::<usize>() + c.negatives;
        correct as f64 / total as f64
    }

    /// Slot accuracies laid out as the 3×3 grid.
    pub fn heatmap(&self) -> Matrix {
        Matrix::new(GRID_SIDE, GRID_SIDE, self.acc.to_vec()).expect("nine slots")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::data(format!("report: {e}")))?;
        let found = v.get("schema_version").and_then(|s| s.as_u64()).unwrap_or(0);
        if found != u64::from(REPORT_SCHEMA_VERSION) {
            return Err(Error::Version {
                expected: REPORT_SCHEMA_VERSION,
                found: u32::try_from(found).unwrap_or(u32::MAX),
            });
        }
        serde_json::from_value(v).map_err(|e| Error::data(format!("report: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub const CSV_HEADER: &'static str = "scheme,seed,acc0,acc1,acc2,acc3,acc4,acc5,acc6,acc7,acc8,acc_neg,avg,delta,delta_sample,avg_pct,delta_pct2,dataset_hash";

    pub fn csv_row(&self) -> String {
        let mut f: Vec<String> = vec![self.scheme.to_string(), self.seed.to_string()];
        f.extend(self.acc.iter().map(|a| a.to_string()));
        f.extend(
            [
                self.acc_neg,
                self.avg,
                self.delta,
                self.delta_sample,
                self.avg_percent(),
                self.delta_percent_sq(),
            ]
            .iter()
            .map(|v| v.to_string()),
        );
        f.push(self.dataset_hash.clone());
        f.join(",")
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}

/// Counts correct answers given one yes/no prediction per evaluation sample,
/// in dataset order.
pub fn report_from_predictions(dataset: &ProbeDataset, scheme: Scheme, seed: u64, predictions: &[bool]) -> Result<PositionReport> {
    if predictions.len() != dataset.eval.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} evaluation samples",
            predictions.len(),
            dataset.eval.len()
        )));
    }
    let mut counts = SampleCounts {
        positives: [0; NUM_SLOTS],
        correct: [0; NUM_SLOTS],
        negatives: 0,
        correct_negatives: 0,
    };
    for (s, &yes) in dataset.eval.iter().zip(predictions) {
        if s.label.is_yes() {
            counts.positives[s.slot] += 1;
            counts.correct[s.slot] += usize::from(yes);
        } else {
            counts.negatives += 1;
            counts.correct_negatives += usize::from(!yes);
        }
    }
    PositionReport::from_counts(scheme, seed, counts, dataset.hash())
}

/// Model predictions over the evaluation split. `threads = Some(1)` (or
/// `None`) runs on the calling thread; more threads use a worker pool.
/// Results do not depend on the thread count.
pub fn predict(model: &Model, dataset: &ProbeDataset, threads: Option<usize>) -> Result<Vec<bool>> {
    let one = |s: &crate::probe::CompositeSample| -> Result<bool> {
        Ok(model.forward(&s.to_input(&dataset.library)?, false)?.predicts_yes())
    };
    match threads {
        Some(n) if n > 1 => {
            use rayon::prelude::*;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::config(format!("thread pool: {e}")))?;
            pool.install(|| dataset.eval.par_iter().map(one).collect())
        }
        _ => dataset.eval.iter().map(one).collect(),
    }
}

pub fn evaluate(model: &Model, dataset: &ProbeDataset, threads: Option<usize>) -> Result<PositionReport> {
    let preds = predict(model, dataset, threads)?;
    let cfg = model.config();
    report_from_predictions(dataset, cfg.scheme, cfg.seed, &preds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema_version: u32,
    pub baseline: PositionReport,
    pub candidate: PositionReport,
    /// candidate − baseline, per slot.
    pub acc_diff: [f64; NUM_SLOTS],
    pub avg_diff: f64,
    pub delta_diff: f64,
    pub variance_reduced: bool,
    pub avg_non_degraded: bool,
    pub avg_tolerance: f64,
}

/// Compares two reports over the same dataset.
pub fn compare(baseline: &PositionReport, candidate: &PositionReport) -> Result<ComparisonReport> {
    if baseline.dataset_hash != candidate.dataset_hash {
        return Err(Error::data(format!(
            "reports come from different datasets ({} vs {})",
            baseline.dataset_hash, candidate.dataset_hash
        )));
    }
    let mut acc_diff = [0.0; NUM_SLOTS];
    for (d, (b, c)) in acc_diff.iter_mut().zip(baseline.acc.iter().zip(&candidate.acc)) {
        *d = c - b;
    }
    Ok(ComparisonReport {
        schema_version: REPORT_SCHEMA_VERSION,
        baseline: baseline.clone(),
        candidate: candidate.clone(),
        acc_diff,
        avg_diff: candidate.avg - baseline.avg,
        delta_diff: candidate.delta - baseline.delta,
        variance_reduced: candidate.delta < baseline.delta,
        avg_non_degraded: candidate.avg >= baseline.avg - AVG_TOLERANCE,
        avg_tolerance: AVG_TOLERANCE,
    })
}

impl ComparisonReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{}\n{}\n{}\n",
            PositionReport::CSV_HEADER,
            self.baseline.csv_row(),
            self.candidate.csv_row()
        )
    }
}

/// Per-seed comparisons and the aggregate trend verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub schema_version: u32,
    pub pairs: Vec<ComparisonReport>,
    pub seeds_variance_reduced: usize,
    pub mean_avg_baseline: f64,
    pub mean_avg_candidate: f64,
    /// Variance reduced in at least two thirds of the seeds.
    pub variance_trend: bool,
    pub avg_non_degraded: bool,
}

pub fn compare_seeds(pairs: &[(PositionReport, PositionReport)]) -> Result<TrendReport> {
    if pairs.is_empty() {
        return Err(Error::data("no report pairs to compare"));
    }
    let comps = pairs
        .iter()
        .map(|(b, c)| compare(b, c))
        .collect::<Result<Vec<_>>>()?;
    let n = comps.len();
    let reduced = comps.iter().filter(|c| c.variance_reduced).count();
    let mean = |f: &dyn Fn(&ComparisonReport) -> f64| comps.iter().map(f).sum::<f64>() / n as f64;
    let mean_b = mean(&|c| c.baseline.avg);
    let mean_c = mean(&|c| c.candidate.avg);
    Ok(TrendReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seeds_variance_reduced: reduced,
        mean_avg_baseline: mean_b,
        mean_avg_candidate: mean_c,
        variance_trend: 3 * reduced >= 2 * n,
        avg_non_degraded: mean_c >= mean_b - AVG_TOLERANCE,
        pairs: comps,
    })
}

impl TrendReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trend serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(correct: [usize; 9]) -> SampleCounts {
        SampleCounts {
            positives: [10; 9],
            correct,
            negatives: 90,
            correct_negatives: 45,
        }
    }

    #[test]
    fn perfect_and_constant_yes() {
        let r = PositionReport::from_counts(Scheme::Bapa, 0, counts([10; 9]), "h").unwrap();
        assert_eq!((r.acc, r.avg, r.delta), ([1.0; 9], 1.0, 0.0));
        let mut c = counts([10; 9]);
        c.correct_negatives = 0;
        let r = PositionReport::from_counts(Scheme::Bapa, 0, c, "h").unwrap();
        assert_eq!(r.acc_neg, 0.0);
    }

    #[test]
    fn missing_slot_is_an_error() {
        let mut c = counts([5; 9]);
        c.positives[7] = 0;
        assert!(matches!(PositionReport::from_counts(Scheme::Bapa, 0, c, "h"), Err(Error::Data(_))));
    }

    #[test]
    fn compare_guards_and_verdicts() {
        let a = PositionReport::from_counts(Scheme::Sequential, 0, counts([8, 10, 9, 7, 10, 6, 9, 8, 10]), "h").unwrap();
        let b = PositionReport::from_counts(Scheme::Bapa, 0, counts([9; 9]), "h").unwrap();
        let same = compare(&a, &a).unwrap();
        assert!(same.acc_diff.iter().all(|&d| d == 0.0));
        assert_eq!((same.avg_diff, same.delta_diff), (0.0, 0.0));
        let c = compare(&a, &b).unwrap();
        assert!(c.variance_reduced && c.avg_non_degraded);
        let mut other = b.clone();
        other.dataset_hash = "g".into();
        assert!(matches!(compare(&a, &other), Err(Error::Data(_))));
    }

    #[test]
    fn json_round_trip_and_version_guard() {
        let a = PositionReport::from_counts(Scheme::Sequential, 3, counts([8, 10, 9, 7, 10, 6, 9, 8, 10]), "h").unwrap();
        assert_eq!(PositionReport::from_json(&a.to_json()).unwrap(), a);
        let bumped = a.to_json().replacen("\"schema_version\": 1", "\"schema_version\": 9", 1);
        assert!(matches!(PositionReport::from_json(&bumped), Err(Error::Version { found: 9, .. })));
        assert_eq!(a.to_csv().lines().nth(1).unwrap().split(',').count(), PositionReport::CSV_HEADER.split(',').count());
    }
}
