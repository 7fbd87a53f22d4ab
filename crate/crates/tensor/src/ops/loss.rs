use crate::error::{Result, TensorError};
use crate::ops::activation::sigmoid;
use crate::scalar::Scalar;

/// Mean binary cross-entropy on logits in the log-sum-exp form
/// `max(x, 0) - x*y + ln(1 + e^{-|x|})`.
pub fn bce_with_logits<T: Scalar>(logits: &[T], targets: &[T]) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(TensorError::dim("bce_with_logits", "target length", logits.len(), targets.len()));
    }
    if logits.is_empty() {
        return Err(TensorError::invalid("bce_with_logits", "empty batch"));
    }
    let mut total = 0f64;
    for (i, (&x, &y)) in logits.iter().zip(targets).enumerate() {
        let (x, y) = (x.as_f64(), y.as_f64());
        if y != 0.0 && y != 1.0 {
            return Err(TensorError::InvalidTarget { index: i, value: y });
        }
        total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
    }
    Ok(total / logits.len() as f64)
}

pub fn bce_with_logits_backward<T: Scalar>(logits: &[T], targets: &[T], upstream: T) -> Vec<T> {
    let scale = upstream / T::lit(logits.len() as f64);
    logits
        .iter()
        .zip(targets)
        .map(|(&x, &y)| (sigmoid(x) - y) * scale)
        .collect()
}

/// Mean over rows of `2 - 2 cos(p_i, z_i)`; `z` is treated as a constant.
pub fn cosine_loss<T: Scalar>(p: &[T], z: &[T], rows: usize, dim: usize) -> Result<f64> {
    let mut total = 0f64;
    for r in 0..rows {
        let (pr, zr) = (&p[r * dim..(r + 1) * dim], &z[r * dim..(r + 1) * dim]);
        let (dot, pn, zn) = dot_norms(pr, zr);
        if pn == 0.0 || zn == 0.0 {
            return Err(TensorError::ZeroNorm { op: "cosine_loss", row: r });
        }
        total += 2.0 - 2.0 * dot / (pn * zn);
    }
    Ok(total / rows as f64)
}

pub fn cosine_loss_backward<T: Scalar>(p: &[T], z: &[T], rows: usize, dim: usize, upstream: T) -> Vec<T> {
    let mut dp = vec![T::zero(); p.len()];
    let up = upstream.as_f64() / rows as f64;
    for r in 0..rows {
        let (pr, zr) = (&p[r * dim..(r + 1) * dim], &z[r * dim..(r + 1) * dim]);
        let (dot, pn, zn) = dot_norms(pr, zr);
        let cos = dot / (pn * zn);
        for j in 0..dim {
            let ph = pr[j].as_f64() / pn;
            let zh = zr[j].as_f64() / zn;
            dp[r * dim + j] = T::lit(-2.0 * up * (zh - cos * ph) / pn);
        }
    }
    dp
}

fn dot_norms<T: Scalar>(p: &[T], z: &[T]) -> (f64, f64, f64) {
    let mut dot = 0f64;
    let mut pp = 0f64;
    let mut zz = 0f64;
    for (&a, &b) in p.iter().zip(z) {
        let (a, b) = (a.as_f64(), b.as_f64());
        dot += a * b;
        pp += a * a;
        zz += b * b;
    }
    (dot, pp.sqrt(), zz.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_logit_costs_ln2() {
        let l = bce_with_logits(&[0.0f32], &[1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-7);
    }

    #[test]
    fn extreme_logits_do_not_overflow() {
        assert!(bce_with_logits(&[50.0f32], &[1.0]).unwrap() < 1e-20);
        let l = bce_with_logits(&[-50.0f32], &[1.0]).unwrap();
        assert!((l - 50.0).abs() < 1e-9);
        assert!(bce_with_logits(&[1e30f32], &[0.0]).unwrap().is_finite());
    }

    #[test]
    fn non_binary_target_rejected() {
        let err = bce_with_logits(&[0.0f64, 0.0], &[1.0, 0.5]).unwrap_err();
        assert_eq!(err, TensorError::InvalidTarget { index: 1, value: 0.5 });
    }

    #[test]
    fn cosine_loss_reference_points() {
        let z = [1.0f64, 2.0, -1.0];
        assert!(cosine_loss(&z, &z, 1, 3).unwrap().abs() < 1e-15);
        let neg: Vec<f64> = z.iter().map(|v| -v).collect();
        assert!((cosine_loss(&neg, &z, 1, 3).unwrap() - 4.0).abs() < 1e-15);
        assert!((cosine_loss(&[1.0f64, 0.0], &[0.0, 3.0], 1, 2).unwrap() - 2.0).abs() < 1e-15);
        assert!(cosine_loss(&[0.0f64, 0.0], &[0.0, 3.0], 1, 2).is_err());
    }
}
