use crate::scalar::{gemm, Scalar};

/// `y = x W^T + b` with `x: N x In`, `W: Out x In`.
pub fn dense_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, n: usize, fan_in: usize, fan_out: usize) -> Vec<T> {
    let mut y = vec![T::zero(); n * fan_out];
    gemm(n, fan_in, fan_out, x, false, w, true, &mut y, false);
    if let Some(b) = bias {
        for row in y.chunks_mut(fan_out) {
            row.iter_mut().zip(b).for_each(|(v, b)| *v += *b);
        }
    }
    y
}

pub struct DenseGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    n: usize,
    fan_in: usize,
    fan_out: usize,
    need: [bool; 3],
) -> DenseGrads<T> {
    let input = need[0].then(|| {
        let mut dx = vec![T::zero(); n * fan_in];
        gemm(n, fan_out, fan_in, dy, false, w, false, &mut dx, false);
        dx
    });
    let weight = need[1].then(|| {
        let mut dw = vec![T::zero(); fan_out * fan_in];
        gemm(fan_out, n, fan_in, dy, true, x, false, &mut dw, false);
        dw
    });
    let bias = need[2].then(|| {
        let mut db = vec![0f64; fan_out];
        for row in dy.chunks(fan_out) {
            db.iter_mut().zip(row).for_each(|(a, v)| *a += v.as_f64());
        }
        db.into_iter().map(T::lit).collect()
    });
    DenseGrads { input, weight, bias }
}
