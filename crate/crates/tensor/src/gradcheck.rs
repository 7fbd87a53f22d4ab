//! Finite-difference verification of autodiff gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    /// Central-difference step relative to `max(1, |x|)`.
    pub step: f64,
    /// Number of randomly chosen coordinates to probe; `None` probes all.
    pub probes: Option<usize>,
    pub seed: u64,
    /// Denominator floor for the relative error of near-zero gradients.
    pub floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            probes: None,
            seed: 0,
            floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU or max-pool kink.
    pub skipped_kinks: usize,
    pub non_finite: bool,
    /// `(input, element)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

impl GradcheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        !self.non_finite && self.checked > 0 && self.max_rel_error <= tolerance
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_branch_tracking();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok((v.data()[0], g.branch_signature()))
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences at `inputs`, in 64-bit precision.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_branch_tracking();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let base_sig = g.branch_signature();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    drop(g);

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    let chosen: Vec<(usize, usize)> = match opts.probes {
        Some(k) if k < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = sample(&mut rng, coords.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| coords[i]).collect()
        }
        _ => coords,
    };

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        non_finite: analytic.iter().flatten().any(|v| !v.is_finite()),
        worst: None,
    };
    let mut work = inputs.to_vec();
    for (i, j) in chosen {
        let x0 = inputs[i].data()[j];
        let h = opts.step * x0.abs().max(1.0);
        work[i].data_mut()[j] = x0 + h;
        let (fp, sp) = evaluate(&f, &work)?;
        work[i].data_mut()[j] = x0 - h;
        let (fm, sm) = evaluate(&f, &work)?;
        work[i].data_mut()[j] = x0;
        if sp != base_sig || sm != base_sig {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i][j];
        if !numeric.is_finite() || !a.is_finite() {
            report.non_finite = true;
            continue;
        }
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((i, j));
        }
        report.checked += 1;
    }
    Ok(report)
}
