//! AUROC, threshold metrics and run aggregation against direct oracles.

use octmh_core::metrics::{
    aggregate_runs, auroc, evaluate_scores, summarize, t_quantile_975, threshold_metrics, MetricError, MetricKind,
    MetricSet,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Fraction of (positive, negative) pairs ranked correctly, ties counting half.
fn pairwise_auroc(s: &[f64], y: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] && !y[j] {
                den += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn random_set(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = r.random_range(2..60);
    // few distinct levels on half the sets so ties are common
    let levels = if r.random() { 5 } else { 1_000_000 };
    let mut y: Vec<bool> = (0..n).map(|_| r.random()).collect();
    y[0] = true;
    y[1] = false;
    let s = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
    (s, y)
}

#[test]
fn auroc_matches_the_pairwise_count() {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..200 {
        let (s, y) = random_set(&mut r);
        let a = auroc(&s, &y).unwrap();
        let b = pairwise_auroc(&s, &y);
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn auroc_hand_examples() {
    assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
    assert_eq!(auroc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
    assert_eq!(auroc(&[0.0, 1.0], &[false, true]).unwrap(), 1.0);
    assert_eq!(auroc(&[1.0, 2.0], &[true, true]), Err(MetricError::SingleClass));
    assert_eq!(auroc(&[f64::NAN, 2.0], &[true, false]), Err(MetricError::NonFiniteScore(0)));
    assert!(matches!(auroc(&[1.0], &[true, false]), Err(MetricError::LengthMismatch { .. })));
}

#[test]
fn threshold_hand_example() {
    let s = [0.9, 0.6, 0.5, 0.4, 0.2, 0.7];
    let y = [true, false, true, true, false, false];
    let t = threshold_metrics(&s, &y, 0.5).unwrap();
    // predicted positive: 0.9, 0.6, 0.5, 0.7
    assert_eq!((t.counts.tp, t.counts.fp, t.counts.tn, t.counts.fn_), (2, 2, 1, 1));
    assert_eq!(t.recall, 2.0 / 3.0);
    assert_eq!(t.specificity, 1.0 / 3.0);
    assert_eq!(t.precision, 0.5);
    assert!((t.f1 - 2.0 * 0.5 * (2.0 / 3.0) / (0.5 + 2.0 / 3.0)).abs() <= 1e-15);

    let none = threshold_metrics(&[0.1, 0.2], &[true, false], 0.5).unwrap();
    assert_eq!((none.f1, none.recall, none.specificity), (0.0, 0.0, 1.0));
}

#[test]
fn alternating_zero_one_runs_have_the_textbook_interval() {
    let runs: Vec<MetricSet> = (0..10)
        .map(|i| {
            let v = (i % 2) as f64;
            MetricSet { f1: v, auroc: v, recall: v, specificity: v }
        })
        .collect();
    let agg = aggregate_runs(&runs).unwrap();
    // percent scale: five 0s and five 100s, sample sd = sqrt(25000 / 9)
    let t = StudentsT::new(0.0, 1.0, 9.0).unwrap().inverse_cdf(0.975);
    assert!((t - 2.262_157_162_8).abs() <= 1e-9);
    let want = t * (25_000.0f64 / 9.0).sqrt() / 10f64.sqrt();
    for k in MetricKind::ALL {
        let s = agg.get(k);
        assert_eq!(s.mean, 50.0);
        assert!((s.ci95 - want).abs() <= 1e-9, "{k}: {} vs {want}", s.ci95);
        assert_eq!(s.max, 100.0);
    }
    assert_eq!(agg.n_runs, 10);
}

#[test]
fn identical_runs_have_zero_interval() {
    let m = MetricSet { f1: 0.75, auroc: 0.75, recall: 0.6, specificity: 0.9 };
    let agg = aggregate_runs(&[m; 10]).unwrap();
    assert_eq!(agg.f1.mean, 75.0);
    assert_eq!(agg.f1.ci95, 0.0);
    assert_eq!(aggregate_runs(&[m]).unwrap_err(), MetricError::TooFewRuns(1));
}

#[test]
fn t_quantiles_match_tables() {
    for (df, q) in [(1, 12.706_204_736), (4, 2.776_445_105), (9, 2.262_157_163), (30, 2.042_272_456)] {
        assert!((t_quantile_975(df) - q).abs() <= 1e-6, "df {df}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn reversed_scores_give_the_complement(seed in any::<u64>()) {
        let (s, y) = random_set(&mut ChaCha8Rng::seed_from_u64(seed));
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((auroc(&s, &y).unwrap() + auroc(&neg, &y).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn auroc_ignores_monotone_transforms(seed in any::<u64>()) {
        let (s, y) = random_set(&mut ChaCha8Rng::seed_from_u64(seed));
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() + 7.0).collect();
        prop_assert_eq!(auroc(&s, &y).unwrap(), auroc(&t, &y).unwrap());
    }

    #[test]
    fn confusion_counts_add_up(seed in any::<u64>(), thr in 0.0f64..1.0) {
        let (s, y) = random_set(&mut ChaCha8Rng::seed_from_u64(seed));
        let t = threshold_metrics(&s, &y, thr).unwrap();
        let c = t.counts;
        let pos = y.iter().filter(|&&l| l).count();
        prop_assert_eq!(c.tp + c.fp + c.tn + c.fn_, s.len());
        prop_assert_eq!(c.tp + c.fn_, pos);
        prop_assert_eq!(c.tn + c.fp, s.len() - pos);
        for v in [t.f1, t.recall, t.specificity, t.precision] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let m = evaluate_scores(&s, &y).unwrap();
        prop_assert_eq!(m.auroc, auroc(&s, &y).unwrap());
    }

    #[test]
    fn aggregation_ignores_run_order(v in proptest::collection::vec(0.0f64..1.0, 2..15), seed in any::<u64>()) {
        let runs: Vec<MetricSet> = v.iter().map(|&x| MetricSet { f1: x, auroc: 1.0 - x, recall: x * x, specificity: 0.5 }).collect();
        let mut shuffled = runs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(aggregate_runs(&runs).unwrap(), aggregate_runs(&shuffled).unwrap());
        let s = summarize(&v).unwrap();
        prop_assert!(s.ci95 >= 0.0);
        let max = v.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert_eq!(s.max, max);
    }
}
