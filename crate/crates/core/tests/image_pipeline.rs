//! Augmentation chain and evaluation preprocessing.

use octmh_core::augment::{augment_train, augment_with, preprocess_eval, AugmentDraws, AugmentationConfig};
use octmh_core::image::{decode_png, encode_png, ImageBuffer};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(seed: u64, h: usize, w: usize, c: usize) -> ImageBuffer {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    ImageBuffer::new(h, w, c, (0..h * w * c).map(|_| r.random()).collect()).unwrap()
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn identity_draws_equal_eval_preprocessing() {
    for (seed, (h, w, c)) in [(1u64, (50, 70, 1)), (2, (32, 32, 3)), (3, (75, 50, 1))] {
        let img = random_image(seed, h, w, c);
        let cfg = AugmentationConfig::at_size(32);
        let a = augment_with(&img, &cfg, &AugmentDraws::identity()).unwrap();
        let e = preprocess_eval(&img, &cfg).unwrap();
        assert_eq!(a.shape(), &[3, 32, 32]);
        assert!(max_abs_diff(a.data(), e.data()) <= 1e-6, "{}", max_abs_diff(a.data(), e.data()));
    }
}

#[test]
fn identity_draws_at_full_size() {
    let img = random_image(9, 60, 90, 1);
    let cfg = AugmentationConfig::default();
    let a = augment_with(&img, &cfg, &AugmentDraws::identity()).unwrap();
    let e = preprocess_eval(&img, &cfg).unwrap();
    assert_eq!(e.shape(), &[3, 224, 224]);
    assert!(max_abs_diff(a.data(), e.data()) <= 1e-6);
}

#[test]
fn mirror_symmetric_image_is_flip_invariant() {
    let (h, w) = (40, 41);
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mut data = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..=w / 2 {
            let v: u8 = r.random();
            data[y * w + x] = v;
            data[y * w + (w - 1 - x)] = v;
        }
    }
    let img = ImageBuffer::gray(h, w, data).unwrap();
    let cfg = AugmentationConfig::at_size(32);
    for seed in 0..20 {
        let mut draws = AugmentDraws::sample(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        draws.flip = false;
        let a = augment_with(&img, &cfg, &draws).unwrap();
        draws.flip = true;
        let b = augment_with(&img, &cfg, &draws).unwrap();
        assert_eq!(a.data(), b.data(), "draws {draws:?}");
    }
}

#[test]
fn same_seed_gives_identical_tensors() {
    let img = random_image(5, 48, 64, 1);
    let cfg = AugmentationConfig::at_size(40);
    let a = augment_train(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let b = augment_train(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    assert_eq!(a.data(), b.data());
    let e1 = preprocess_eval(&img, &cfg).unwrap();
    let e2 = preprocess_eval(&img, &cfg).unwrap();
    assert_eq!(e1.data(), e2.data());
}

#[test]
fn constant_image_at_the_channel_mean_normalizes_to_zero() {
    // a pixel value v maps to v/255; pick means that are exact pixel values
    let cfg = AugmentationConfig {
        channel_means: [128.0 / 255.0, 64.0 / 255.0, 200.0 / 255.0],
        ..AugmentationConfig::at_size(16)
    };
    let mut data = Vec::new();
    for _ in 0..20 * 20 {
        data.extend([128u8, 64, 200]);
    }
    let img = ImageBuffer::new(20, 20, 3, data).unwrap();
    let t = preprocess_eval(&img, &cfg).unwrap();
    assert!(t.data().iter().all(|v| v.abs() <= 1e-6));
}

#[test]
fn png_round_trip_of_a_gradient() {
    let img = ImageBuffer::gray(2, 2, vec![0, 85, 170, 255]).unwrap();
    let back = decode_png(&encode_png(&img).unwrap()).unwrap();
    assert_eq!(back, img);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn output_shape_and_finiteness(seed in any::<u64>(), h in 1usize..60, w in 1usize..60, rgb in any::<bool>(), size in 8usize..40) {
        let img = random_image(seed, h, w, if rgb { 3 } else { 1 });
        let cfg = AugmentationConfig::at_size(size);
        let t = augment_train(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap();
        prop_assert_eq!(t.shape(), &[3, size, size]);
        prop_assert!(t.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn uniform_noise_normalizes_near_the_expected_mean(seed in any::<u64>()) {
        let img = random_image(seed, 64, 64, 3);
        let cfg = AugmentationConfig::at_size(32);
        let t = preprocess_eval(&img, &cfg).unwrap();
        let plane = 32 * 32;
        for c in 0..3 {
            let m = t.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
            let want = (0.5 - cfg.channel_means[c]) / cfg.channel_stds[c];
            prop_assert!((m - want).abs() <= 0.2, "channel {} mean {} want {}", c, m, want);
        }
    }
}
