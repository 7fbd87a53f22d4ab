use crate::error::{Result, TensorError};
use crate::par;
use crate::scalar::{gemm, Scalar};

/// Lowered columns per GEMM that a sample group aims for; small feature maps
/// are batched so the matrix products stay reasonably large.
const TARGET_COLUMNS: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Validates an NCHW input against an OIHW kernel.
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(TensorError::Rank {
                op: "conv2d",
                expected: 4,
                shape: input.to_vec(),
            });
        }
        if weight.len() != 4 {
            return Err(TensorError::Rank {
                op: "conv2d.weight",
                expected: 4,
                shape: weight.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be positive"));
        }
        if input[1] != weight[1] {
            return Err(TensorError::dim("conv2d", "input channels (dim 1)", weight[1], input[1]));
        }
        let (kh, kw) = (weight[2], weight[3]);
        let (ph, pw) = (input[2] + 2 * padding, input[3] + 2 * padding);
        if kh == 0 || kw == 0 || ph < kh {
            return Err(TensorError::dim("conv2d", "padded input height (dim 2)", kh, ph));
        }
        if pw < kw {
            return Err(TensorError::dim("conv2d", "padded input width (dim 3)", kw, pw));
        }
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            in_h: input[2],
            in_w: input[3],
            out_channels: weight[0],
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    fn out_spatial(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds one image (`C x H x W`) into a `(C*kh*kw) x (oh*ow)` matrix.
impl ConvGeometry {
    /// Samples lowered together into one GEMM. Depends only on the geometry,
    /// so partial sums and their order never depend on the thread count.
    fn group_size(&self) -> usize {
        TARGET_COLUMNS.div_ceil(self.out_spatial().max(1)).clamp(1, self.batch.max(1))
    }
}

/// Writes the patches of one sample into `col`, a `patch_len x row_len`
/// matrix, starting at column `offset`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, col: &mut [T], row_len: usize, offset: usize) {
    let ohw = g.out_spatial();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut col[row * row_len + offset..row * row_len + offset + ohw];
                // Valid output columns for this kernel column.
                let lo = (g.padding.saturating_sub(kj)).div_ceil(g.stride).min(g.out_w);
                let hi = if g.in_w + g.padding > kj {
                    ((g.in_w + g.padding - kj - 1) / g.stride + 1).min(g.out_w)
                } else {
                    0
                }
                .max(lo);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    let base = lo * g.stride + kj - g.padding;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[base..base + hi - lo]);
                    } else {
                        for (i, v) in out_row[lo..hi].iter_mut().enumerate() {
                            *v = src[base + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into one sample's input.
fn col2im<T: Scalar>(col: &[T], g: &ConvGeometry, dx: &mut [T], row_len: usize, offset: usize) {
    let ohw = g.out_spatial();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &col[row * row_len + offset..row * row_len + offset + ohw];
                let lo = (g.padding.saturating_sub(kj)).div_ceil(g.stride).min(g.out_w);
                let hi = if g.in_w + g.padding > kj {
                    ((g.in_w + g.padding - kj - 1) / g.stride + 1).min(g.out_w)
                } else {
                    0
                }
                .max(lo);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let srow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let base = (lo * g.stride + kj).wrapping_sub(g.padding);
                    if g.stride == 1 {
                        for (d, &v) in dst[base..base + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in srow[lo..hi].iter().enumerate() {
                            dst[base + i * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Lowers samples `first..first + count` into a `patch_len x (count * ohw)` matrix.
fn lower_group<T: Scalar>(x: &[T], g: &ConvGeometry, first: usize, count: usize, col: &mut [T]) {
    let row_len = count * g.out_spatial();
    for s in 0..count {
        let n = first + s;
        im2col(&x[n * g.in_len()..(n + 1) * g.in_len()], g, col, row_len, s * g.out_spatial());
    }
}

/// Scratch buffer of exactly `len` elements. Contents are unspecified; every
/// caller overwrites all of it.
fn sized<T: Scalar>(buf: &mut Vec<T>, len: usize) -> &mut [T] {
    if buf.len() < len {
        buf.resize(len, T::zero());
    }
    &mut buf[..len]
}

/// Gathers `dy` of a sample group into `out_channels x (count * ohw)`.
fn gather_dy<T: Scalar>(dy: &[T], g: &ConvGeometry, first: usize, count: usize, m: &mut [T]) {
    let ohw = g.out_spatial();
    let row_len = count * ohw;
    for s in 0..count {
        let base = (first + s) * g.out_channels * ohw;
        for o in 0..g.out_channels {
            m[o * row_len + s * ohw..o * row_len + (s + 1) * ohw]
                .copy_from_slice(&dy[base + o * ohw..base + (o + 1) * ohw]);
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    let ohw = g.out_spatial();
    let k = g.patch_len();
    let per_out = g.out_channels * ohw;
    let gs = g.group_size();
    let mut out = vec![T::zero(); g.batch * per_out];
    let scratch = || (Vec::<T>::new(), Vec::<T>::new());
    par::for_each_chunk_mut_init(&mut out, (gs * per_out).max(1), scratch, |(col, prod), gi, y| {
        let first = gi * gs;
        let count = y.len() / per_out.max(1);
        if count == 1 && g.is_pointwise() {
            gemm(g.out_channels, k, ohw, w, false, &x[first * g.in_len()..], false, y, false);
        } else {
            let row_len = count * ohw;
            let col = sized(col, k * row_len);
            lower_group(x, g, first, count, col);
            if count == 1 {
                gemm(g.out_channels, k, ohw, w, false, col, false, y, false);
            } else {
                let prod = sized(prod, g.out_channels * row_len);
                gemm(g.out_channels, k, row_len, w, false, col, false, prod, false);
                for s in 0..count {
                    for o in 0..g.out_channels {
                        y[s * per_out + o * ohw..s * per_out + (o + 1) * ohw]
                            .copy_from_slice(&prod[o * row_len + s * ohw..o * row_len + (s + 1) * ohw]);
                    }
                }
            }
        }
        if let Some(b) = bias {
            for (i, row) in y.chunks_mut(ohw.max(1)).enumerate() {
                let o = i % g.out_channels;
                row.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    });
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeometry,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let ohw = g.out_spatial();
    let k = g.patch_len();
    let per_out = g.out_channels * ohw;
    let gs = g.group_size();

    let input = need_input.then(|| {
        let mut dx = vec![T::zero(); g.batch * g.in_len()];
        let scratch = || (Vec::<T>::new(), Vec::<T>::new());
        par::for_each_chunk_mut_init(&mut dx, (gs * g.in_len()).max(1), scratch, |(dyg, dcol), gi, dxg| {
            let first = gi * gs;
            let count = dxg.len() / g.in_len().max(1);
            let row_len = count * ohw;
            if count == 1 && g.is_pointwise() {
                gemm(k, g.out_channels, ohw, w, true, &dy[first * per_out..], false, dxg, false);
                return;
            }
            let dy_mat = if count == 1 {
                &dy[first * per_out..(first + 1) * per_out]
            } else {
                gather_dy(dy, g, first, count, sized(dyg, g.out_channels * row_len));
                &dyg[..]
            };
            let dcol = sized(dcol, k * row_len);
            gemm(k, g.out_channels, row_len, w, true, dy_mat, false, dcol, false);
            for s in 0..count {
                col2im(dcol, g, &mut dxg[s * g.in_len()..(s + 1) * g.in_len()], row_len, s * ohw);
            }
        });
        dx
    });

    let weight = need_weight.then(|| {
        let groups = g.batch.div_ceil(gs);
        let scratch = || (Vec::<T>::new(), Vec::<T>::new());
        let partials = par::map_indexed_init(groups, scratch, |(dyg, col), gi| {
            let first = gi * gs;
            let count = gs.min(g.batch - first);
            let row_len = count * ohw;
            let mut dw = vec![T::zero(); g.out_channels * k];
            let dy_mat = if count == 1 {
                &dy[first * per_out..(first + 1) * per_out]
            } else {
                gather_dy(dy, g, first, count, sized(dyg, g.out_channels * row_len));
                &dyg[..]
            };
            if count == 1 && g.is_pointwise() {
                gemm(g.out_channels, ohw, k, dy_mat, false, &x[first * g.in_len()..], true, &mut dw, false);
            } else {
                let col = sized(col, k * row_len);
                lower_group(x, g, first, count, col);
                gemm(g.out_channels, row_len, k, dy_mat, false, col, true, &mut dw, false);
            }
            dw
        });
        let mut iter = partials.into_iter();
        let mut total = iter.next().unwrap_or_else(|| vec![T::zero(); g.out_channels * k]);
        for p in iter {
            total.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        total
    });

    let bias = need_bias.then(|| {
        let mut db = vec![0f64; g.out_channels];
        for n in 0..g.batch {
            for (o, acc) in db.iter_mut().enumerate() {
                let start = n * per_out + o * ohw;
                *acc += dy[start..start + ohw].iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        db.into_iter().map(T::lit).collect()
    });

    ConvGrads { input, weight, bias }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_returns_input() {
        let g = ConvGeometry::new(&[1, 1, 2, 2], &[1, 1, 1, 1], 1, 0).unwrap();
        let y = conv2d_forward(&[1.0f32; 4], &[1.0], None, &g);
        assert_eq!(y, vec![1.0; 4]);
    }

    #[test]
    fn output_size_formula() {
        let g = ConvGeometry::new(&[2, 3, 7, 9], &[4, 3, 3, 3], 2, 1).unwrap();
        assert_eq!(g.output_shape(), vec![2, 4, 4, 5]);
    }

    #[test]
    fn channel_mismatch_names_dimension() {
        let err = ConvGeometry::new(&[1, 4, 8, 8], &[2, 3, 3, 3], 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("input channels (dim 1)"), "{msg}");
        assert!(msg.contains("expected 3, got 4"), "{msg}");
    }

    #[test]
    fn kernel_larger_than_input_rejected() {
        assert!(ConvGeometry::new(&[1, 1, 2, 2], &[1, 1, 3, 3], 1, 0).is_err());
        assert!(ConvGeometry::new(&[1, 1, 2, 2], &[1, 1, 3, 3], 1, 1).is_ok());
    }
}
