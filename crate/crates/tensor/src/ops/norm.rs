//! Per-channel batch normalization over `N x C x (spatial)` buffers.

use crate::scalar::Scalar;

/// Layout helper: `batch x channels x spatial`, spatial = 1 for rank-2 input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelLayout {
    pub batch: usize,
    pub channels: usize,
    pub spatial: usize,
}

impl ChannelLayout {
    pub fn count(&self) -> usize {
        self.batch * self.spatial
    }

    #[inline]
    fn plane(&self, n: usize, c: usize) -> std::ops::Range<usize> {
        let start = (n * self.channels + c) * self.spatial;
        start..start + self.spatial
    }
}

/// Sum in f64 with eight independent lanes, which the compiler vectorizes.
#[inline]
fn lane_sum<T: Scalar>(xs: &[T], f: impl Fn(f64) -> f64) -> f64 {
    let mut acc = [0f64; 8];
    let chunks = xs.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for (a, v) in acc.iter_mut().zip(c) {
            *a += f(v.as_f64());
        }
    }
    let mut total: f64 = acc.iter().sum();
    for v in rest {
        total += f(v.as_f64());
    }
    total
}

#[inline]
fn lane_dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let mut acc = [0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i].as_f64() * y[i].as_f64();
        }
    }
    let mut total: f64 = acc.iter().sum();
    for (x, y) in ra.iter().zip(rb) {
        total += x.as_f64() * y.as_f64();
    }
    total
}

pub struct BatchNormForward<T> {
    pub output: Vec<T>,
    /// Normalized input before the affine transform.
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance (biased when only one element per channel).
    pub batch_var: Vec<T>,
}

/// Writes `xhat = (x - mean) * istd` and `y = g * xhat + b` for all channels,
/// in memory order.
fn normalize<T: Scalar>(x: &[T], layout: ChannelLayout, coef: &[(f64, f64, f64, f64)]) -> (Vec<T>, Vec<T>) {
    let mut xhat = Vec::with_capacity(x.len());
    let mut output = Vec::with_capacity(x.len());
    for n in 0..layout.batch {
        for (c, &(mean, istd, g, b)) in coef.iter().enumerate() {
            let plane = &x[layout.plane(n, c)];
            xhat.extend(plane.iter().map(|v| T::lit((v.as_f64() - mean) * istd)));
            output.extend(plane.iter().map(|v| T::lit(g * ((v.as_f64() - mean) * istd) + b)));
        }
    }
    (output, xhat)
}

pub fn batchnorm_train<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    layout: ChannelLayout,
    eps: f64,
) -> BatchNormForward<T> {
    let m = layout.count();
    let mut coef = Vec::with_capacity(layout.channels);
    let mut inv_std = Vec::with_capacity(layout.channels);
    let mut batch_mean = Vec::with_capacity(layout.channels);
    let mut batch_var = Vec::with_capacity(layout.channels);
    for c in 0..layout.channels {
        let mut sum = 0f64;
        for n in 0..layout.batch {
            sum += lane_sum(&x[layout.plane(n, c)], |v| v);
        }
        let mean = sum / m as f64;
        let mut sq = 0f64;
        for n in 0..layout.batch {
            sq += lane_sum(&x[layout.plane(n, c)], |v| (v - mean) * (v - mean));
        }
        let var = sq / m as f64;
        let istd = 1.0 / (var + eps).sqrt();
        coef.push((mean, istd, gamma[c].as_f64(), beta[c].as_f64()));
        inv_std.push(T::lit(istd));
        batch_mean.push(T::lit(mean));
        let unbiased = if m > 1 { sq / (m - 1) as f64 } else { var };
        batch_var.push(T::lit(unbiased));
    }
    let (output, xhat) = normalize(x, layout, &coef);
    BatchNormForward {
        output,
        xhat,
        inv_std,
        batch_mean,
        batch_var,
    }
}

/// Inference-mode normalization with fixed running statistics.
pub fn batchnorm_eval<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    layout: ChannelLayout,
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let coef: Vec<_> = (0..layout.channels)
        .map(|c| {
            let istd = 1.0 / (running_var[c].as_f64() + eps).sqrt();
            (running_mean[c].as_f64(), istd, gamma[c].as_f64(), beta[c].as_f64())
        })
        .collect();
    let inv_std = coef.iter().map(|c| T::lit(c.1)).collect();
    let (output, xhat) = normalize(x, layout, &coef);
    (output, xhat, inv_std)
}

pub struct BatchNormGrads<T> {
    pub input: Option<Vec<T>>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Backward pass. `train` selects batch-statistic (true) or fixed-statistic
/// (false) input gradients.
pub fn batchnorm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    layout: ChannelLayout,
    train: bool,
    need_input: bool,
) -> BatchNormGrads<T> {
    let m = layout.count() as f64;
    let mut dgamma = Vec::with_capacity(layout.channels);
    let mut dbeta = Vec::with_capacity(layout.channels);
    // dx = a * dy + b + c * xhat per channel
    let mut coef = Vec::with_capacity(layout.channels);
    for c in 0..layout.channels {
        let mut sum_dy = 0f64;
        let mut sum_dy_xhat = 0f64;
        for n in 0..layout.batch {
            let r = layout.plane(n, c);
            sum_dy += lane_sum(&dy[r.clone()], |v| v);
            sum_dy_xhat += lane_dot(&dy[r.clone()], &xhat[r]);
        }
        dgamma.push(T::lit(sum_dy_xhat));
        dbeta.push(T::lit(sum_dy));
        let scale = gamma[c].as_f64() * inv_std[c].as_f64();
        coef.push(if train {
            (scale, -scale / m * sum_dy, -scale / m * sum_dy_xhat)
        } else {
            (scale, 0.0, 0.0)
        });
    }
    let input = need_input.then(|| {
        let mut dx = Vec::with_capacity(dy.len());
        for n in 0..layout.batch {
            for (c, &(a, b, k)) in coef.iter().enumerate() {
                let r = layout.plane(n, c);
                dx.extend(
                    dy[r.clone()]
                        .iter()
                        .zip(&xhat[r])
                        .map(|(d, h)| T::lit(a * d.as_f64() + b + k * h.as_f64())),
                );
            }
        }
        dx
    });
    BatchNormGrads {
        input,
        gamma: dgamma,
        beta: dbeta,
    }
}
