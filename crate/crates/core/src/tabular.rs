//! Whitening, L2-regularized logistic regression with cross-validated C,
//! feature importance and late fusion.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, PatientRecord, Split, FEATURE_NAMES};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_scores, MetricSet};
use crate::rng;
use crate::train::PatientPrediction;

/// Gradient norm at which the Newton iteration stops.
pub const GRAD_TOL: f64 = 1e-8;
const MAX_NEWTON_ITERS: usize = 200;

pub const CNN_FEATURE: &str = "cnn_prediction";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhiteningParams {
    pub mean: Vec<f64>,
    /// Population standard deviation.
    pub std: Vec<f64>,
    /// Columns with zero spread; they whiten to 0.
    pub degenerate: Vec<bool>,
}

fn check_rows(x: &[Vec<f64>], op: &str) -> Result<usize> {
    let d = x.first().map(Vec::len).ok_or_else(|| Error::Regression(format!("{op}: empty input")))?;
    if let Some((i, r)) = x.iter().enumerate().find(|(_, r)| r.len() != d) {
        return Err(Error::Regression(format!("{op}: row {i} has {} features, expected {d}", r.len())));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Regression(format!("{op}: non-finite feature value")));
    }
    Ok(d)
}

pub fn fit_whitening(x: &[Vec<f64>]) -> Result<WhiteningParams> {
    let d = check_rows(x, "whitening")?;
    if x.len() < 2 {
        return Err(Error::Regression("whitening needs at least 2 rows".into()));
    }
    let n = x.len() as f64;
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for j in 0..d {
        mean[j] = x.iter().map(|r| r[j]).sum::<f64>() / n;
        std[j] = (x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
    }
    let degenerate = x[0]
        .iter()
        .enumerate()
        .map(|(j, first)| x.iter().all(|r| r[j] == *first))
        .collect();
    Ok(WhiteningParams { mean, std, degenerate })
}

impl WhiteningParams {
    pub fn apply_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.mean.len() {
            return Err(Error::Regression(format!(
                "whitening: {} features, expected {}",
                row.len(),
                self.mean.len()
            )));
        }
        Ok(row
            .iter()
            .enumerate()
            .map(|(j, v)| if self.degenerate[j] { 0.0 } else { (v - self.mean[j]) / self.std[j] })
            .collect())
    }

    pub fn apply(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        x.iter().map(|r| self.apply_row(r)).collect()
    }
}

pub fn apply_whitening(x: &[Vec<f64>], params: &WhiteningParams) -> Result<Vec<Vec<f64>>> {
    params.apply(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub folds: usize,
    pub c_grid: Vec<f64>,
    pub seed: u64,
}

/// Ten values log-spaced over `[1e-4, 1e4]`.
pub fn default_c_grid() -> Vec<f64> {
    (0..10).map(|k| 10f64.powf(-4.0 + 8.0 * k as f64 / 9.0)).collect()
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            c_grid: default_c_grid(),
            seed: 0,
        }
    }
}

impl CvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!("folds {} must be at least 2", self.folds)));
        }
        if self.c_grid.is_empty() || self.c_grid.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::Config("c_grid must hold positive values".into()));
        }
        if self.c_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("c_grid must be strictly increasing".into()));
        }
        Ok(())
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_labels(y: &[bool], n: usize) -> Result<()> {
    if y.len() != n {
        return Err(Error::Regression(format!("{} labels for {n} rows", y.len())));
    }
    if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
        return Err(Error::Regression("labels contain a single class".into()));
    }
    Ok(())
}

/// Penalized objective, gradient and Hessian; the bias is the last coordinate.
struct Problem {
    x: DMatrix<f64>,
    y: DVector<f64>,
    inv_c: f64,
}

impl Problem {
    fn new(x: &[Vec<f64>], y: &[bool], c: f64) -> Self {
        let (n, d) = (x.len(), x[0].len());
        let xm = DMatrix::from_fn(n, d + 1, |i, j| if j < d { x[i][j] } else { 1.0 });
        Self {
            x: xm,
            y: DVector::from_iterator(n, y.iter().map(|&v| v as u8 as f64)),
            inv_c: 1.0 / c,
        }
    }

    fn d(&self) -> usize {
        self.x.ncols() - 1
    }

    fn objective(&self, w: &DVector<f64>) -> f64 {
        let eta = &self.x * w;
        let data: f64 = eta.iter().zip(self.y.iter()).map(|(e, y)| softplus(*e) - y * e).sum();
        let pen: f64 = w.rows(0, self.d()).norm_squared() * 0.5 * self.inv_c;
        data + pen
    }

    fn grad_hess(&self, w: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let eta = &self.x * w;
        let p = eta.map(sigmoid);
        let mut g = self.x.transpose() * (&p - &self.y);
        let s = p.map(|v| v * (1.0 - v));
        let mut xs = self.x.clone();
        for (i, mut row) in xs.row_iter_mut().enumerate() {
            row *= s[i];
        }
        let mut h = self.x.transpose() * xs;
        for j in 0..self.d() {
            g[j] += self.inv_c * w[j];
            h[(j, j)] += self.inv_c;
        }
        (g, h)
    }
}

/// Fits weights and bias for one C by damped Newton iterations.
pub fn fit_logistic(x: &[Vec<f64>], y: &[bool], c: f64) -> Result<(Vec<f64>, f64)> {
    let d = check_rows(x, "logistic")?;
    check_labels(y, x.len())?;
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::Regression(format!("C {c} must be positive")));
    }
    let prob = Problem::new(x, y, c);
    let mut w = DVector::zeros(d + 1);
    let mut f = prob.objective(&w);
    for _ in 0..MAX_NEWTON_ITERS {
        let (g, h) = prob.grad_hess(&w);
        if g.norm() <= GRAD_TOL {
            return Ok((w.rows(0, d).iter().copied().collect(), w[d]));
        }
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => h
                .lu()
                .solve(&g)
                .ok_or_else(|| Error::Regression("singular Hessian".into()))?,
        };
        let slope = g.dot(&step);
        if slope <= 64.0 * f64::EPSILON * f.abs().max(1.0) {
            // The predicted decrease is below the objective's resolution, so a
            // line search only sees rounding; take the full Newton step.
            w -= &step;
            f = prob.objective(&w);
            continue;
        }
        let mut t = 1.0;
        loop {
            let cand = &w - &step * t;
            let fc = prob.objective(&cand);
            if fc <= f - 1e-4 * t * slope || t < 1e-12 {
                w = cand;
                f = fc;
                break;
            }
            t *= 0.5;
        }
    }
    let (g, _) = prob.grad_hess(&w);
    if g.norm() <= GRAD_TOL {
        Ok((w.rows(0, d).iter().copied().collect(), w[d]))
    } else {
        Err(Error::Regression(format!(
            "Newton iteration did not reach gradient norm {GRAD_TOL} (got {:.3e}) for C = {c}",
            g.norm()
        )))
    }
}

/// Stratified fold of every row: each class is shuffled and dealt round-robin,
/// negatives continuing where positives stopped.
pub fn stratified_folds(y: &[bool], folds: usize, seed: u64) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..y.len()).filter(|&i| y[i]).collect();
    let mut neg: Vec<usize> = (0..y.len()).filter(|&i| !y[i]).collect();
    pos.shuffle(&mut rng::substream(seed, &[rng::FOLDS, 1]));
    neg.shuffle(&mut rng::substream(seed, &[rng::FOLDS, 0]));
    let mut out = vec![0; y.len()];
    for (k, &i) in pos.iter().chain(&neg).enumerate() {
        out[i] = k % folds;
    }
    out
}

fn predict_row(w: &[f64], b: f64, x: &[f64]) -> f64 {
    sigmoid(w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvScore {
    pub c: f64,
    /// Mean of the per-fold accuracies.
    pub accuracy: f64,
}

/// Mean fold accuracy for each C of the grid.
pub fn cv_scores(x: &[Vec<f64>], y: &[bool], cv: &CvConfig) -> Result<Vec<CvScore>> {
    cv.validate()?;
    check_rows(x, "cross-validation")?;
    check_labels(y, x.len())?;
    if x.len() < cv.folds {
        return Err(Error::Regression(format!("{} rows for {} folds", x.len(), cv.folds)));
    }
    let fold = stratified_folds(y, cv.folds, cv.seed);
    let jobs = cv.c_grid.len() * cv.folds;
    let per = octmh_tensor::par::map_indexed(jobs, |j| -> Result<f64> {
        let (ci, k) = (j / cv.folds, j % cv.folds);
        let (mut xt, mut yt) = (Vec::new(), Vec::new());
        for i in 0..x.len() {
            if fold[i] != k {
                xt.push(x[i].clone());
                yt.push(y[i]);
            }
        }
        let (w, b) = fit_logistic(&xt, &yt, cv.c_grid[ci])?;
        let held: Vec<usize> = (0..x.len()).filter(|&i| fold[i] == k).collect();
        let correct = held
            .iter()
            .filter(|&&i| (predict_row(&w, b, &x[i]) >= 0.5) == y[i])
            .count();
        Ok(correct as f64 / held.len() as f64)
    });
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(cv
        .c_grid
        .iter()
        .enumerate()
        .map(|(ci, &c)| CvScore {
            c,
            accuracy: per[ci * cv.folds..(ci + 1) * cv.folds].iter().sum::<f64>() / cv.folds as f64,
        })
        .collect())
}

/// Best C; ties go to the larger C.
pub fn select_c(scores: &[CvScore]) -> Result<f64> {
    let mut best: Option<&CvScore> = None;
    for s in scores {
        if best.is_none_or(|b| s.accuracy >= b.accuracy - 1e-12) {
            best = Some(s);
        }
    }
    best.map(|b| b.c)
        .ok_or_else(|| Error::Regression("empty C grid".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    pub feature_names: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub c: f64,
    pub whitening: WhiteningParams,
    pub cv_scores: Vec<CvScore>,
}

/// Whitens on `raw`, selects C by cross-validation and refits on all rows.
pub fn fit_logistic_cv(raw: &[Vec<f64>], y: &[bool], feature_names: &[String], cv: &CvConfig) -> Result<RegressionModel> {
    let d = check_rows(raw, "regression")?;
    if feature_names.len() != d {
        return Err(Error::Regression(format!("{} names for {d} features", feature_names.len())));
    }
    check_labels(y, raw.len())?;
    let whitening = fit_whitening(raw)?;
    let x = whitening.apply(raw)?;
    let scores = cv_scores(&x, y, cv)?;
    let c = select_c(&scores)?;
    let (weights, bias) = fit_logistic(&x, y, c)?;
    Ok(RegressionModel {
        feature_names: feature_names.to_vec(),
        weights,
        bias,
        c,
        whitening,
        cv_scores: scores,
    })
}

impl RegressionModel {
    /// `sigmoid(w . x + b)` for an already whitened row.
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::Regression(format!(
                "{} features, model has {}",
                x.len(),
                self.weights.len()
            )));
        }
        Ok(predict_row(&self.weights, self.bias, x))
    }

    /// Probability for a raw row, whitened with the stored parameters.
    pub fn predict_raw(&self, raw: &[f64]) -> Result<f64> {
        self.predict_proba(&self.whitening.apply_row(raw)?)
    }

    pub fn best_cv_accuracy(&self) -> f64 {
        self.cv_scores
            .iter()
            .find(|s| s.c == self.c)
            .map_or(f64::NAN, |s| s.accuracy)
    }
}

/// `100 |w_i| / sum |w_j|`.
pub fn feature_importance(weights: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = weights.iter().map(|w| w.abs()).sum();
    if total == 0.0 || !total.is_finite() {
        return Err(Error::Regression("feature importance undefined for all-zero weights".into()));
    }
    Ok(weights.iter().map(|w| 100.0 * w.abs() / total).collect())
}

/// Clinical row extended by the CNN probability.
pub fn late_fusion_features(clinical: &[f64], cnn_probability: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&cnn_probability) {
        return Err(Error::Regression(format!("CNN probability {cnn_probability} outside [0, 1]")));
    }
    let mut v = clinical.to_vec();
    v.push(cnn_probability);
    Ok(v)
}

/// Outcome of fitting on the regression set and scoring the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionOutcome {
    pub model: RegressionModel,
    /// Percent per feature, in `model.feature_names` order.
    pub importance: Vec<f64>,
    /// None when the test split lacks one of the classes.
    pub test_metrics: Option<MetricSet>,
    pub test_predictions: Vec<PatientPrediction>,
}

/// Raw clinical rows in [`FEATURE_NAMES`] order.
pub fn clinical_rows(records: &[PatientRecord], idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| records[i].clinical.to_vec().to_vec()).collect()
}

/// Train and validation patients, in manifest order.
pub fn regression_indices(manifest: &DatasetManifest) -> Vec<usize> {
    (0..manifest.records.len())
        .filter(|&i| manifest.records[i].split != Split::Test)
        .collect()
}

fn fit_and_score(
    manifest: &DatasetManifest,
    rows: &[Vec<f64>],
    names: Vec<String>,
    cv: &CvConfig,
) -> Result<RegressionOutcome> {
    let reg = regression_indices(manifest);
    if reg.is_empty() {
        return Err(Error::Dataset("regression set (train + val) is empty".into()));
    }
    let labels: Vec<bool> = manifest.records.iter().map(|r| r.label()).collect();
    let x: Vec<Vec<f64>> = reg.iter().map(|&i| rows[i].clone()).collect();
    let y: Vec<bool> = reg.iter().map(|&i| labels[i]).collect();
    let model = fit_logistic_cv(&x, &y, &names, cv)?;
    let importance = feature_importance(&model.weights)?;
    let test = manifest.indices(Split::Test);
    let scores = test
        .iter()
        .map(|&i| model.predict_raw(&rows[i]))
        .collect::<Result<Vec<_>>>()?;
    let test_labels: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
    let test_predictions = test
        .iter()
        .zip(&scores)
        .map(|(&i, &p)| PatientPrediction {
            patient_id: manifest.records[i].patient_id.clone(),
            probability: p,
            label: labels[i],
        })
        .collect();
    Ok(RegressionOutcome {
        test_metrics: evaluate_scores(&scores, &test_labels).ok(),
        model,
        importance,
        test_predictions,
    })
}

/// Clinical-only logistic regression.
pub fn run_regression(manifest: &DatasetManifest, cv: &CvConfig) -> Result<RegressionOutcome> {
    let all: Vec<usize> = (0..manifest.records.len()).collect();
    let rows = clinical_rows(&manifest.records, &all);
    let names = FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    fit_and_score(manifest, &rows, names, cv)
}

/// Clinical features plus the CNN probability of each record (indexed like
/// `manifest.records`).
pub fn run_fusion(manifest: &DatasetManifest, cnn_probabilities: &[f64], cv: &CvConfig) -> Result<RegressionOutcome> {
    if cnn_probabilities.len() != manifest.records.len() {
        return Err(Error::Regression(format!(
            "{} CNN probabilities for {} records",
            cnn_probabilities.len(),
            manifest.records.len()
        )));
    }
    let rows = manifest
        .records
        .iter()
        .zip(cnn_probabilities)
        .map(|(r, &p)| late_fusion_features(&r.clinical.to_vec(), p))
        .collect::<Result<Vec<_>>>()?;
    let mut names: Vec<String> = FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    names.push(CNN_FEATURE.to_string());
    fit_and_score(manifest, &rows, names, cv)
}
