use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments, one moment buffer per tracked tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    config: AdamConfig,
    step: u64,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Fresh state tracking tensors of the given element counts.
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first_moment: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// Restores a state from explicit moments.
    pub fn from_parts(config: AdamConfig, step: u64, first: Vec<Vec<T>>, second: Vec<Vec<T>>) -> Result<Self> {
        if first.len() != second.len() || first.iter().zip(&second).any(|(a, b)| a.len() != b.len()) {
            return Err(TensorError::invalid("adam", "moment buffers disagree in size"));
        }
        Ok(Self {
            config,
            step,
            first_moment: first,
            second_moment: second,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[Vec<T>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<T>] {
        &self.second_moment
    }

    /// One update of every tracked tensor. All gradients must be present
    /// and sized like their parameters.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[Option<&[T]>]) -> Result<()> {
        let tracked = self.first_moment.len();
        if params.len() != tracked {
            return Err(TensorError::dim("adam", "parameter count", tracked, params.len()));
        }
        if grads.len() != tracked {
            return Err(TensorError::dim("adam", "gradient count", tracked, grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let g = g.ok_or(TensorError::MissingGradient(i))?;
            let n = self.first_moment[i].len();
            if p.len() != n {
                return Err(TensorError::dim("adam", format!("parameter {i} length"), n, p.len()));
            }
            if g.len() != n {
                return Err(TensorError::dim("adam", format!("gradient {i} length"), n, g.len()));
            }
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].expect("checked above");
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for j in 0..p.len() {
                let gj = g[j].as_f64();
                let mj = beta1 * m[j].as_f64() + (1.0 - beta1) * gj;
                let vj = beta2 * v[j].as_f64() + (1.0 - beta2) * gj * gj;
                m[j] = T::lit(mj);
                v[j] = T::lit(vj);
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
                p[j] = T::lit(p[j].as_f64() - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_moves_by_lr() {
        let mut state = AdamState::<f64>::new(AdamConfig::default(), &[1]);
        let mut p = [0.0];
        state.step(&mut [&mut p], &[Some(&[1.0])]).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        assert!((p[0] + 1e-4 / (1.0 + 1e-8)).abs() < 1e-18);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn missing_gradient_rejected_without_side_effects() {
        let mut state = AdamState::<f32>::new(AdamConfig::default(), &[1, 2]);
        let mut a = [1.0];
        let mut b = [1.0, 2.0];
        let err = state.step(&mut [&mut a, &mut b], &[Some(&[1.0]), None]).unwrap_err();
        assert_eq!(err, TensorError::MissingGradient(1));
        assert_eq!(state.step_count(), 0);
        assert_eq!(a, [1.0]);
    }
}
