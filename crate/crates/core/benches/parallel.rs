//! Data-parallel paths of the training pipeline, on a single-thread pool and
//! on the default pool.
//!
//! `cargo bench -p octmh-core --bench parallel` compares both pools;
//! adding `--no-default-features` measures the sequential build, where
//! every loop runs without rayon.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use octmh_core::augment::{augment_into, AugmentDraws, AugmentationConfig};
use octmh_core::dataset::PatientImages;
use octmh_core::image::ImageBuffer;
use octmh_core::tabular::{cv_scores, CvConfig};
use octmh_core::train::predict_patients;
use octmh_core::{ArchitectureName, ArchitectureSpec, Model};
use octmh_tensor::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::ThreadPoolBuilder;

const SIZE: usize = 64;

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let default_threads = rayon::current_num_threads();
    vec![
        ("1-thread".to_string(), ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        (
            format!("{default_threads}-thread"),
            ThreadPoolBuilder::new().num_threads(default_threads).build().unwrap(),
        ),
    ]
}

fn images(n: usize) -> Vec<ImageBuffer> {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    (0..n)
        .map(|_| ImageBuffer::gray(80, 80, (0..6400).map(|_| r.random()).collect()).unwrap())
        .collect()
}

fn bench_augment(c: &mut Criterion) {
    let imgs = images(32);
    let aug = AugmentationConfig::at_size(SIZE);
    let draws: Vec<AugmentDraws> = (0..32)
        .map(|i| AugmentDraws::sample(&aug, &mut ChaCha8Rng::seed_from_u64(i)))
        .collect();
    let len = aug.output_len();
    let mut group = c.benchmark_group("augment_batch_32_at_64px");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(&name), |b| {
            pool.install(|| {
                b.iter(|| {
                    let mut buf = vec![0f32; 32 * len];
                    par::for_each_chunk_mut(&mut buf, len, |i, out| {
                        augment_into(&imgs[i], &aug, &draws[i], out).unwrap();
                    });
                    black_box(buf)
                })
            })
        });
    }
    group.finish();
}

fn bench_predict(c: &mut Criterion) {
    let model = Model::random(ArchitectureSpec::new(ArchitectureName::CbrTiny).with_input_size(SIZE), 0);
    let imgs = images(32);
    let patients: Vec<PatientImages> = imgs
        .chunks(2)
        .map(|p| PatientImages {
            horizontal: p[0].clone(),
            vertical: p[1].clone(),
        })
        .collect();
    let refs: Vec<&PatientImages> = patients.iter().collect();
    let aug = AugmentationConfig::at_size(SIZE);
    let mut group = c.benchmark_group("predict_16_patients_cbr_tiny");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(&name), |b| {
            pool.install(|| b.iter(|| black_box(predict_patients(&model, &refs, &aug).unwrap())))
        });
    }
    group.finish();
}

fn bench_cv(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<Vec<f64>> = (0..200).map(|_| (0..6).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
    let y: Vec<bool> = x.iter().map(|row| row[0] + 0.5 * row[1] + r.random_range(-1.0..1.0) > 0.0).collect();
    let cv = CvConfig::default();
    let mut group = c.benchmark_group("logistic_cv_200x6");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(&name), |b| {
            pool.install(|| b.iter(|| black_box(cv_scores(&x, &y, &cv).unwrap())))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_augment, bench_predict, bench_cv);
criterion_main!(benches);
