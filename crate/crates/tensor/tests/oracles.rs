//! Kernels checked against independent brute-force formulas.

use octmh_tensor::ops::conv::{conv2d_forward, ConvGeometry};
use octmh_tensor::{AdamConfig, AdamState, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct six-loop convolution (batch, out channel, out y, out x, in
/// channel, kernel window) with explicit zero padding.
#[allow(clippy::too_many_arguments)]
fn direct_conv(
    x: &[f64],
    w: &[f64],
    (n, c, h, wd): (usize, usize, usize, usize),
    (o, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut y = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w[((oc * c + ic) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    y[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    y
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn assert_rel_close(a: &[f32], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    for (x, y) in a.iter().zip(b) {
        let err = (*x as f64 - y).abs() / scale;
        assert!(err <= tol, "{x} vs {y} (rel {err})");
    }
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = random_vec(&mut rng, 2 * 3 * 8 * 8);
    let w = random_vec(&mut rng, 4 * 3 * 3 * 3);
    let geom = ConvGeometry::new(&[2, 3, 8, 8], &[4, 3, 3, 3], 1, 0).unwrap();
    let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    let wf: Vec<f32> = w.iter().map(|&v| v as f32).collect();
    let got = conv2d_forward(&xf, &wf, None, &geom);
    // Oracle on the f32-rounded inputs, accumulated in f64.
    let xr: Vec<f64> = xf.iter().map(|&v| v as f64).collect();
    let wr: Vec<f64> = wf.iter().map(|&v| v as f64).collect();
    let want = direct_conv(&xr, &wr, (2, 3, 8, 8), (4, 3, 3), 1, 0);
    assert_rel_close(&got, &want, 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_all_stride_padding_combinations(
        seed in any::<u64>(),
        n in 1usize..3, c in 1usize..4, o in 1usize..4,
        h in 3usize..9, wd in 3usize..9,
        k in 1usize..4, stride in 1usize..4, pad in 0usize..3,
    ) {
        prop_assume!(h + 2 * pad >= k && wd + 2 * pad >= k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_vec(&mut rng, n * c * h * wd);
        let w = random_vec(&mut rng, o * c * k * k);
        let geom = ConvGeometry::new(&[n, c, h, wd], &[o, c, k, k], stride, pad).unwrap();
        let got = conv2d_forward(&x, &w, None, &geom);
        let want = direct_conv(&x, &w, (n, c, h, wd), (o, k, k), stride, pad);
        let scale = want.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() / scale <= 1e-12);
        }
    }

    #[test]
    fn batchnorm_train_output_is_standardized(seed in any::<u64>(), n in 2usize..5, c in 1usize..4, s in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * c * s * s).map(|_| rng.random_range(-3.0..7.0)).collect();
        let mut g = Graph::<f64>::new();
        let xv = g.constant(Tensor::new(vec![n, c, s, s], x.clone()).unwrap());
        let gamma = g.constant(Tensor::full(vec![c], 1.0));
        let beta = g.constant(Tensor::zeros(vec![c]));
        let (y, _) = g.batchnorm2d(xv, gamma, beta, octmh_tensor::BatchNormMode::Train { eps: 1e-5 }).unwrap();
        let y = g.data(y);
        let plane = s * s;
        let channel = |data: &[f64], ch: usize| -> Vec<f64> {
            (0..n).flat_map(|b| data[(b * c + ch) * plane..(b * c + ch + 1) * plane].to_vec()).collect()
        };
        for ch in 0..c {
            let raw = channel(&x, ch);
            let raw_mean = raw.iter().sum::<f64>() / raw.len() as f64;
            let raw_var = raw.iter().map(|v| (v - raw_mean).powi(2)).sum::<f64>() / raw.len() as f64;
            // eps = 1e-5 biases the variance by eps / raw_var.
            prop_assume!(raw_var > 1.0);
            let vals = channel(y, ch);
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            prop_assert!(mean.abs() <= 1e-5);
            prop_assert!((var - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity(
        steps in 0u64..50, vals in proptest::collection::vec(-10.0f64..10.0, 1..8),
        second in proptest::collection::vec(0.0f64..5.0, 8), lr in 1e-6f64..1.0,
    ) {
        let n = vals.len();
        let state_v: Vec<f64> = second[..n].to_vec();
        let mut state = AdamState::from_parts(
            AdamConfig { lr, ..AdamConfig::default() },
            steps,
            vec![vec![0.0; n]],
            vec![state_v],
        ).unwrap();
        let mut p = vals.clone();
        let zeros = vec![0.0; n];
        for _ in 0..3 {
            state.step(&mut [&mut p], &[Some(&zeros)]).unwrap();
        }
        prop_assert_eq!(p, vals);
        prop_assert_eq!(state.step_count(), steps + 3);
    }
}

#[test]
fn bce_matches_naive_formula_in_wide_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits: Vec<f32> = (0..16).map(|_| rng.random_range(-8.0..8.0)).collect();
    let targets: Vec<f32> = (0..16).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(vec![16], logits.clone()).unwrap());
    let l = g.bce_with_logits(x, &targets).unwrap();
    let got = g.data(l)[0] as f64;

    let naive: f64 = logits
        .iter()
        .zip(&targets)
        .map(|(&x, &y)| {
            let s = 1.0 / (1.0 + (-(x as f64)).exp());
            -((y as f64) * s.ln() + (1.0 - y as f64) * (1.0 - s).ln())
        })
        .sum::<f64>()
        / 16.0;
    assert!((got - naive).abs() / naive <= 1e-6, "{got} vs {naive}");
}

#[test]
fn bce_reference_values() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
    let l = g.bce_with_logits(x, &[1.0]).unwrap();
    assert!((g.data(l)[0] - std::f32::consts::LN_2).abs() < 1e-6);
    let big = g.constant(Tensor::new(vec![2], vec![50.0, -50.0]).unwrap());
    let pos = g.bce_with_logits(big, &[1.0, 1.0]).unwrap();
    // mean of ~0 and ~50
    assert!((g.data(pos)[0] - 25.0).abs() < 1e-4);
}

/// Adam written out as the scalar recurrence, one line per quantity.
fn adam_scalar_oracle(grads: &[f64], lr: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let mut m = 0.0;
    let mut v = 0.0;
    let mut p = 0.0;
    let mut traj = Vec::new();
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as f64;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powf(t));
        let v_hat = v / (1.0 - b2.powf(t));
        p -= lr * m_hat / (v_hat.sqrt() + eps);
        traj.push(p);
    }
    traj
}

#[test]
fn adam_three_step_trajectory() {
    let want = adam_scalar_oracle(&[1.0, 1.0, 1.0], 1e-4);
    // Constant gradient: every bias-corrected step has m_hat = v_hat = 1.
    assert!((want[2] + 3.0e-4 / (1.0 + 1e-8)).abs() < 1e-15);
    let mut state = AdamState::<f64>::new(AdamConfig::default(), &[1]);
    let mut p = [0.0];
    for expected in &want {
        state.step(&mut [&mut p], &[Some(&[1.0])]).unwrap();
        assert!((p[0] - expected).abs() <= 1e-10);
    }
    assert_eq!(state.step_count(), 3);
}

#[test]
fn adam_varying_gradients_follow_recurrence() {
    let grads = [0.5, -2.0, 0.1, 3.0, -0.7];
    let want = adam_scalar_oracle(&grads, 1e-3);
    let mut state = AdamState::<f64>::new(AdamConfig { lr: 1e-3, ..AdamConfig::default() }, &[1]);
    let mut p = [0.0];
    for (g, expected) in grads.iter().zip(&want) {
        state.step(&mut [&mut p], &[Some(&[*g])]).unwrap();
        assert!((p[0] - expected).abs() <= 1e-12);
    }
}

#[test]
fn adam_fresh_state_zero_gradient_unchanged() {
    let mut state = AdamState::<f32>::new(AdamConfig::default(), &[3]);
    let mut p = [1.0f32, -2.0, 0.5];
    for _ in 0..10 {
        state.step(&mut [&mut p], &[Some(&[0.0; 3])]).unwrap();
    }
    assert_eq!(p, [1.0, -2.0, 0.5]);
}
