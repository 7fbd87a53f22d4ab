//! Classification metrics and multi-run aggregation.

use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("labels contain a single class; metric undefined")]
    SingleClass,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("score at index {0} is not finite")]
    NonFiniteScore(usize),
    #[error("need at least 2 runs to aggregate, got {0}")]
    TooFewRuns(usize),
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    F1,
    Auroc,
    Recall,
    Specificity,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [MetricKind::F1, MetricKind::Auroc, MetricKind::Recall, MetricKind::Specificity];

    pub fn label(self) -> &'static str {
        match self {
            MetricKind::F1 => "F1",
            MetricKind::Auroc => "AUROC",
            MetricKind::Recall => "Recall",
            MetricKind::Specificity => "Specificity",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            MetricKind::F1 => "f1",
            MetricKind::Auroc => "auroc",
            MetricKind::Recall => "recall",
            MetricKind::Specificity => "specificity",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Metrics of one run, as fractions in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub f1: f64,
    pub auroc: f64,
    pub recall: f64,
    pub specificity: f64,
}

impl MetricSet {
    pub fn get(&self, kind: MetricKind) -> f64 {
        match kind {
            MetricKind::F1 => self.f1,
            MetricKind::Auroc => self.auroc,
            MetricKind::Recall => self.recall,
            MetricKind::Specificity => self.specificity,
        }
    }

    pub fn percent(&self, kind: MetricKind) -> f64 {
        100.0 * self.get(kind)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricError::NonFiniteScore(i));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    Ok((pos, neg))
}

/// Area under the ROC curve via the rank-sum statistic; tied scores share
/// their average rank, which counts each tied pair as one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    let (pos, neg) = check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based: i+1 ..= j+1
        let avg = (i + j + 2) as f64 / 2.0;
        let p = order[i..=j].iter().filter(|&&k| labels[k]).count();
        pos_rank_sum += avg * p as f64;
        i = j + 1;
    }
    let u = pos_rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// A score counts as a positive prediction when `score >= threshold`.
pub fn threshold_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ThresholdMetrics, MetricError> {
    check(scores, labels)?;
    let mut c = ConfusionCounts::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(ThresholdMetrics {
        counts: c,
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
        // Same as 2PR/(P+R), and 0 when there are no true positives.
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    })
}

pub fn evaluate_scores(scores: &[f64], labels: &[bool]) -> Result<MetricSet, MetricError> {
    let t = threshold_metrics(scores, labels, DEFAULT_THRESHOLD)?;
    Ok(MetricSet {
        f1: t.f1,
        auroc: auroc(scores, labels)?,
        recall: t.recall,
        specificity: t.specificity,
    })
}

/// Mean, 95% t-interval half-width and maximum of a metric across runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub ci95: f64,
    pub max: f64,
}

/// Two-sided 97.5% quantile of Student's t with `df` degrees of freedom.
pub fn t_quantile_975(df: usize) -> f64 {
    StudentsT::new(0.0, 1.0, df as f64)
        .expect("df >= 1")
        .inverse_cdf(0.975)
}

/// Summary of `values`, independent of their order: sums run over the
/// sorted values so the floating-point result does not depend on it.
pub fn summarize(values: &[f64]) -> Result<MetricSummary, MetricError> {
    let n = values.len();
    if n < 2 {
        return Err(MetricError::TooFewRuns(n));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    // shifted by the smallest value, so identical runs give exactly zero spread
    let base = v[0];
    let mean = base + v.iter().map(|x| x - base).sum::<f64>() / n as f64;
    let ss: f64 = {
        let mut d: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
        d.sort_by(f64::total_cmp);
        d.iter().sum()
    };
    let s = (ss / (n - 1) as f64).sqrt();
    Ok(MetricSummary {
        mean,
        ci95: t_quantile_975(n - 1) * s / (n as f64).sqrt(),
        max: v[n - 1],
    })
}

/// Per-metric summaries in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n_runs: usize,
    pub f1: MetricSummary,
    pub auroc: MetricSummary,
    pub recall: MetricSummary,
    pub specificity: MetricSummary,
}

impl AggregateReport {
    pub fn get(&self, kind: MetricKind) -> &MetricSummary {
        match kind {
            MetricKind::F1 => &self.f1,
            MetricKind::Auroc => &self.auroc,
            MetricKind::Recall => &self.recall,
            MetricKind::Specificity => &self.specificity,
        }
    }
}

pub fn aggregate_runs(runs: &[MetricSet]) -> Result<AggregateReport, MetricError> {
    let s = |k: MetricKind| summarize(&runs.iter().map(|r| r.percent(k)).collect::<Vec<_>>());
    Ok(AggregateReport {
        n_runs: runs.len(),
        f1: s(MetricKind::F1)?,
        auroc: s(MetricKind::Auroc)?,
        recall: s(MetricKind::Recall)?,
        specificity: s(MetricKind::Specificity)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_extremes() {
        let labels = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.2, 0.3, 0.4], &labels).unwrap(), 1.0);
        assert_eq!(auroc(&[0.4, 0.3, 0.2, 0.1], &labels).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5; 4], &labels).unwrap(), 0.5);
        assert_eq!(auroc(&[0.5; 2], &[true, true]), Err(MetricError::SingleClass));
    }

    #[test]
    fn all_positive_predictor() {
        let mut labels = vec![true; 8];
        labels.extend([false; 9]);
        let t = threshold_metrics(&[0.9; 17], &labels, 0.5).unwrap();
        assert_eq!(t.recall, 1.0);
        assert_eq!(t.specificity, 0.0);
        assert_eq!(t.counts.tp + t.counts.fn_, 8);
    }

    #[test]
    fn threshold_is_inclusive() {
        let t = threshold_metrics(&[0.5, 0.49], &[true, false], 0.5).unwrap();
        assert_eq!((t.f1, t.recall, t.specificity), (1.0, 1.0, 1.0));
    }

    #[test]
    fn no_true_positive_f1_is_zero() {
        let t = threshold_metrics(&[0.1, 0.9], &[true, false], 0.5).unwrap();
        assert_eq!(t.f1, 0.0);
    }

    #[test]
    fn t_interval_hand_value() {
        let v: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
        let s = summarize(&v).unwrap();
        assert!((t_quantile_975(9) - 2.262157).abs() < 1e-6);
        assert!((s.mean - 0.5).abs() < 1e-15);
        let sd = (2.5f64 / 9.0).sqrt();
        assert!((sd - 0.527046).abs() < 1e-6);
        assert!((s.ci95 - 2.262157 * sd / 10f64.sqrt()).abs() < 1e-6);
        assert_eq!(s.max, 1.0);
        assert!(summarize(&[1.0]).is_err());
    }

    #[test]
    fn identical_runs_zero_ci() {
        let s = summarize(&[0.75; 10]).unwrap();
        assert_eq!((s.mean, s.ci95, s.max), (0.75, 0.0, 0.75));
    }
}
