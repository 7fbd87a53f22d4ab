use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub batch: usize,
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn new(input: &[usize], kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(TensorError::Rank {
                op: "max_pool2d",
                expected: 4,
                shape: input.to_vec(),
            });
        }
        if kernel == 0 || stride == 0 {
            return Err(TensorError::invalid("max_pool2d", "kernel and stride must be positive"));
        }
        if padding * 2 > kernel {
            return Err(TensorError::invalid("max_pool2d", "padding must be at most half the kernel"));
        }
        let (ph, pw) = (input[2] + 2 * padding, input[3] + 2 * padding);
        if ph < kernel {
            return Err(TensorError::dim("max_pool2d", "padded input height (dim 2)", kernel, ph));
        }
        if pw < kernel {
            return Err(TensorError::dim("max_pool2d", "padded input width (dim 3)", kernel, pw));
        }
        Ok(Self {
            batch: input[0],
            channels: input[1],
            in_h: input[2],
            in_w: input[3],
            kernel,
            stride,
            padding,
            out_h: (ph - kernel) / stride + 1,
            out_w: (pw - kernel) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.channels, self.out_h, self.out_w]
    }
}

/// Returns the pooled output and, per output element, the flat input index
/// of the selected maximum (first maximum wins on ties).
pub fn max_pool2d_forward<T: Scalar>(x: &[T], g: &PoolGeometry) -> (Vec<T>, Vec<usize>) {
    if g.padding == 0 && g.kernel == g.stride {
        max_pool_tiled(x, g)
    } else {
        max_pool_general(x, g)
    }
}

fn max_pool_general<T: Scalar>(x: &[T], g: &PoolGeometry) -> (Vec<T>, Vec<usize>) {
    let planes = g.batch * g.channels;
    let mut out = Vec::with_capacity(planes * g.out_h * g.out_w);
    let mut argmax = Vec::with_capacity(out.capacity());
    let pad = g.padding as isize;
    for p in 0..planes {
        let base = p * g.in_h * g.in_w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * g.in_w + ix as usize;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

/// Non-overlapping, unpadded windows: same result as the general path
/// without per-element bounds checks.
fn max_pool_tiled<T: Scalar>(x: &[T], g: &PoolGeometry) -> (Vec<T>, Vec<usize>) {
    let planes = g.batch * g.channels;
    let per_plane = g.out_h * g.out_w;
    let mut out = vec![T::zero(); planes * per_plane];
    let mut argmax = vec![0usize; planes * per_plane];
    let k = g.kernel;
    let w = g.in_w;
    for p in 0..planes {
        let base = p * g.in_h * w;
        let plane = &x[base..base + g.in_h * w];
        let o = &mut out[p * per_plane..(p + 1) * per_plane];
        let a = &mut argmax[p * per_plane..(p + 1) * per_plane];
        for oy in 0..g.out_h {
            let top = oy * k * w;
            let o_row = &mut o[oy * g.out_w..(oy + 1) * g.out_w];
            let a_row = &mut a[oy * g.out_w..(oy + 1) * g.out_w];
            if k == 2 {
                let r0 = &plane[top..top + w];
                let r1 = &plane[top + w..top + 2 * w];
                for (ox, (ov, av)) in o_row.iter_mut().zip(a_row.iter_mut()).enumerate() {
                    let x0 = 2 * ox;
                    let (mut best, mut bi) = (r0[x0], top + x0);
                    if r0[x0 + 1] > best {
                        best = r0[x0 + 1];
                        bi = top + x0 + 1;
                    }
                    if r1[x0] > best {
                        best = r1[x0];
                        bi = top + w + x0;
                    }
                    if r1[x0 + 1] > best {
                        best = r1[x0 + 1];
                        bi = top + w + x0 + 1;
                    }
                    *ov = best;
                    *av = base + bi;
                }
                continue;
            }
            for (ox, (ov, av)) in o_row.iter_mut().zip(a_row.iter_mut()).enumerate() {
                let x0 = ox * k;
                let mut best = plane[top + x0];
                let mut bi = top + x0;
                for ky in 0..k {
                    let row = top + ky * w + x0;
                    for (kx, &v) in plane[row..row + k].iter().enumerate() {
                        if v > best {
                            best = v;
                            bi = row + kx;
                        }
                    }
                }
                *ov = best;
                *av = base + bi;
            }
        }
    }
    (out, argmax)
}

pub fn max_pool2d_backward<T: Scalar>(dy: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (d, &i) in dy.iter().zip(argmax) {
        dx[i] += *d;
    }
    dx
}

/// `N x C x H x W -> N x C`.
pub fn global_avg_pool_forward<T: Scalar>(x: &[T], planes: usize, spatial: usize) -> Vec<T> {
    (0..planes)
        .map(|p| {
            let s: f64 = x[p * spatial..(p + 1) * spatial].iter().map(|v| v.as_f64()).sum();
            T::lit(s / spatial as f64)
        })
        .collect()
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &[T], spatial: usize) -> Vec<T> {
    let scale = T::lit(1.0 / spatial as f64);
    dy.iter()
        .flat_map(|&d| std::iter::repeat_n(d * scale, spatial))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiled_path_matches_general() {
        let g = PoolGeometry::new(&[2, 3, 9, 8], 2, 2, 0).unwrap();
        // few distinct values, so ties are common
        let x: Vec<f32> = (0..2 * 3 * 9 * 8).map(|i| ((i * 7) % 5) as f32).collect();
        assert_eq!(max_pool_tiled(&x, &g), max_pool_general(&x, &g));
        let g3 = PoolGeometry::new(&[1, 2, 9, 9], 3, 3, 0).unwrap();
        let x3: Vec<f32> = (0..162).map(|i| ((i * 11) % 7) as f32).collect();
        assert_eq!(max_pool_tiled(&x3, &g3), max_pool_general(&x3, &g3));
    }

    #[test]
    fn two_by_two_pool() {
        let g = PoolGeometry::new(&[1, 1, 2, 4], 2, 2, 0).unwrap();
        let x = [1.0f32, 5.0, 2.0, 0.0, 3.0, 4.0, 8.0, 1.0];
        let (y, arg) = max_pool2d_forward(&x, &g);
        assert_eq!(y, vec![5.0, 8.0]);
        assert_eq!(arg, vec![1, 6]);
        let dx = max_pool2d_backward(&[1.0, 2.0], &arg, 8);
        assert_eq!(dx, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn padded_pool_shape() {
        let g = PoolGeometry::new(&[1, 1, 8, 8], 3, 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (4, 4));
    }

    #[test]
    fn odd_size_floors() {
        let g = PoolGeometry::new(&[1, 1, 5, 5], 2, 2, 0).unwrap();
        assert_eq!((g.out_h, g.out_w), (2, 2));
    }
}
