#![allow(dead_code)]

use std::path::{Path, PathBuf};

use octmh_core::synth::{generate_synthetic, SyntheticConfig, SyntheticPreset};

/// Small on-disk synthetic dataset; returns the manifest path.
pub fn tiny_dataset(dir: &Path, preset: SyntheticPreset, n: usize, image_size: usize, seed: u64) -> PathBuf {
    let cfg = SyntheticConfig {
        n,
        image_size,
        ..preset.config()
    };
    generate_synthetic(&cfg, seed, dir).unwrap()
}

pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}
