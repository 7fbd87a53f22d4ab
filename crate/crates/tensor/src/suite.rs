//! The gradient verification suite: randomized finite-difference probes for
//! every layer kind plus a composite CBR-shaped graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
use crate::graph::{BatchNormMode, Graph, Var};
use crate::tensor::Tensor;

/// Relative-error tolerance the suite is judged against.
pub const SUITE_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Case {
    Conv2d,
    BatchNorm,
    MaxPool,
    PoolDenseRelu,
    PoolDenseSigmoid,
    BceWithLogits,
    CosineLoss,
    AddScale,
    CompositeCbr,
}

impl Case {
    pub const ALL: [Case; 9] = [
        Case::Conv2d,
        Case::BatchNorm,
        Case::MaxPool,
        Case::PoolDenseRelu,
        Case::PoolDenseSigmoid,
        Case::BceWithLogits,
        Case::CosineLoss,
        Case::AddScale,
        Case::CompositeCbr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Case::Conv2d => "conv2d",
            Case::BatchNorm => "batchnorm2d",
            Case::MaxPool => "max_pool2d",
            Case::PoolDenseRelu => "global_avg_pool+dense+relu",
            Case::PoolDenseSigmoid => "global_avg_pool+dense+sigmoid",
            Case::BceWithLogits => "bce_with_logits",
            Case::CosineLoss => "cosine_loss",
            Case::AddScale => "conv+add+scale",
            Case::CompositeCbr => "composite_cbr",
        }
    }

    fn seed_base(self) -> u64 {
        Case::ALL.iter().position(|&c| c == self).unwrap() as u64 * 1000
    }
}

/// Outcome of all trials of one case.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub case: Case,
    pub trials: u64,
    /// Total coordinates compared across trials.
    pub probes: usize,
    pub max_rel_error: f64,
    /// First trial that failed, if any.
    pub failed_trial: Option<u64>,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.failed_trial.is_none() && self.probes > 0
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn probe(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn check<F>(f: F, inputs: &[Tensor<f64>], trial: u64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    gradcheck(f, inputs, GradcheckOptions { seed: trial, step: 1e-5, ..Default::default() })
}

fn trial(case: Case, t: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed_base() + t);
    match case {
        Case::Conv2d => {
            let (n, c, o) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
            let k = rng.random_range(1..4);
            let stride = rng.random_range(1..3);
            let pad = rng.random_range(0..2);
            let h = rng.random_range(k.max(2)..7);
            let w = rng.random_range(k.max(2)..7);
            let x = rand_tensor(&mut rng, vec![n, c, h, w]);
            let wt = rand_tensor(&mut rng, vec![o, c, k, k]);
            let b = rand_tensor(&mut rng, vec![o]);
            let oh = (h + 2 * pad - k) / stride + 1;
            let ow = (w + 2 * pad - k) / stride + 1;
            let p = probe(&mut rng, n * o * oh * ow);
            check(
                move |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                    g.weighted_sum(y, &p)
                },
                &[x, wt, b],
                t,
            )
        }
        Case::BatchNorm => {
            // At least 8 elements per channel; with fewer the normalized output is
            // nearly flat in x and central differences lose their accuracy.
            let (n, c) = (rng.random_range(2..4), rng.random_range(1..4));
            let s = rng.random_range(2..4);
            let x = rand_tensor(&mut rng, vec![n, c, s, s]);
            let gamma = rand_tensor(&mut rng, vec![c]);
            let beta = rand_tensor(&mut rng, vec![c]);
            let p = probe(&mut rng, n * c * s * s);
            let train = t.is_multiple_of(2);
            let rm: Vec<f64> = probe(&mut rng, c);
            let rv: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
            check(
                move |g, v| {
                    let mode = if train {
                        BatchNormMode::Train { eps: 1e-5 }
                    } else {
                        BatchNormMode::Eval {
                            running_mean: &rm,
                            running_var: &rv,
                            eps: 1e-5,
                        }
                    };
                    let (y, _) = g.batchnorm2d(v[0], v[1], v[2], mode)?;
                    g.weighted_sum(y, &p)
                },
                &[x, gamma, beta],
                t,
            )
        }
        Case::MaxPool => {
            let (n, c) = (rng.random_range(1..3), rng.random_range(1..3));
            let k = rng.random_range(2..4);
            let stride = rng.random_range(1..3);
            let pad = if k == 3 { rng.random_range(0..2) } else { 0 };
            let h = rng.random_range(k..8);
            let x = rand_tensor(&mut rng, vec![n, c, h, h]);
            let o = (h + 2 * pad - k) / stride + 1;
            let p = probe(&mut rng, n * c * o * o);
            check(
                move |g, v| {
                    let y = g.max_pool2d(v[0], k, stride, pad)?;
                    g.weighted_sum(y, &p)
                },
                &[x],
                t,
            )
        }
        Case::PoolDenseRelu | Case::PoolDenseSigmoid => {
            let (n, c, s) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5));
            let out = rng.random_range(1..4);
            let x = rand_tensor(&mut rng, vec![n, c, s, s]);
            let w = rand_tensor(&mut rng, vec![out, c]);
            let b = rand_tensor(&mut rng, vec![out]);
            let p = probe(&mut rng, n * out);
            let relu = case == Case::PoolDenseRelu;
            check(
                move |g, v| {
                    let y = g.global_avg_pool(v[0])?;
                    let y = g.dense(y, v[1], Some(v[2]))?;
                    let y = if relu { g.relu(y) } else { g.sigmoid(y) };
                    g.weighted_sum(y, &p)
                },
                &[x, w, b],
                t,
            )
        }
        Case::BceWithLogits => {
            let n = rng.random_range(1..17);
            let logits = Tensor::new(vec![n], (0..n).map(|_| rng.random_range(-6.0..6.0)).collect())?;
            let targets: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
            check(move |g, v| g.bce_with_logits(v[0], &targets), &[logits], t)
        }
        Case::CosineLoss => {
            let (rows, dim) = (rng.random_range(1..5), rng.random_range(2..6));
            // Rows near the origin make cos so curved that central differences
            // stop resolving 1e-5; keep every row norm at least 0.5.
            let mut pred = rand_tensor(&mut rng, vec![rows, dim]);
            for row in pred.data_mut().chunks_mut(dim) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 0.5 {
                    let k = 0.5 / norm.max(1e-3);
                    row.iter_mut().for_each(|v| *v *= k);
                }
            }
            let target = probe(&mut rng, rows * dim);
            check(move |g, v| g.cosine_loss(v[0], &target), &[pred], t)
        }
        Case::AddScale => {
            let c = rng.random_range(1..4);
            let s = rng.random_range(3..6);
            let x = rand_tensor(&mut rng, vec![2, c, s, s]);
            let w = rand_tensor(&mut rng, vec![c, c, 3, 3]);
            let p = probe(&mut rng, 2 * c * s * s);
            check(
                move |g, v| {
                    let y = g.conv2d(v[0], v[1], None, 1, 1)?;
                    let y = g.add(y, v[0])?;
                    let y = g.scale(y, 0.5);
                    g.weighted_sum(y, &p)
                },
                &[x, w],
                t,
            )
        }
        Case::CompositeCbr => {
            // conv -> batchnorm(train) -> relu -> maxpool -> global pool -> dense -> BCE
            let inputs = vec![
                rand_tensor(&mut rng, vec![2, 3, 8, 8]),
                rand_tensor(&mut rng, vec![4, 3, 3, 3]),
                Tensor::new(vec![4], (0..4).map(|_| rng.random_range(0.5..1.5)).collect())?,
                rand_tensor(&mut rng, vec![4]),
                rand_tensor(&mut rng, vec![1, 4]),
                rand_tensor(&mut rng, vec![1]),
            ];
            check(
                |g, v| {
                    let y = g.conv2d(v[0], v[1], None, 1, 1)?;
                    let (y, _) = g.batchnorm2d(y, v[2], v[3], BatchNormMode::Train { eps: 1e-5 })?;
                    let y = g.relu(y);
                    let y = g.max_pool2d(y, 2, 2, 0)?;
                    let y = g.global_avg_pool(y)?;
                    let y = g.dense(y, v[4], Some(v[5]))?;
                    g.bce_with_logits(y, &[1.0, 0.0])
                },
                &inputs,
                t,
            )
        }
    }
}

/// Runs `trials` randomized trials of `case`.
pub fn run_case(case: Case, trials: u64) -> Result<CaseResult> {
    let mut out = CaseResult {
        case,
        trials,
        probes: 0,
        max_rel_error: 0.0,
        failed_trial: None,
    };
    for t in 0..trials {
        let report = trial(case, t)?;
        out.probes += report.checked;
        out.max_rel_error = out.max_rel_error.max(if report.non_finite { f64::INFINITY } else { report.max_rel_error });
        if !report.passed(SUITE_TOLERANCE) && out.failed_trial.is_none() {
            out.failed_trial = Some(t);
        }
    }
    Ok(out)
}

/// Runs every case.
pub fn run_suite(trials: u64) -> Result<Vec<CaseResult>> {
    Case::ALL.iter().map(|&c| run_case(c, trials)).collect()
}
