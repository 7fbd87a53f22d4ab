//! Autodiff gradients against central finite differences in f64.

use octmh_tensor::suite::{run_case, Case};

const TRIALS: u64 = 100;

fn assert_case(case: Case, trials: u64) {
    let r = run_case(case, trials).unwrap();
    assert!(r.passed(), "{r:?}");
    assert!(r.probes >= 100, "{r:?}");
}

#[test]
fn conv2d_gradients() {
    assert_case(Case::Conv2d, TRIALS);
}

#[test]
fn batchnorm_gradients_both_modes() {
    assert_case(Case::BatchNorm, TRIALS);
}

#[test]
fn max_pool_gradients() {
    assert_case(Case::MaxPool, TRIALS);
}

#[test]
fn pooling_dense_and_activation_gradients() {
    assert_case(Case::PoolDenseRelu, TRIALS);
    assert_case(Case::PoolDenseSigmoid, TRIALS);
}

#[test]
fn loss_gradients() {
    assert_case(Case::BceWithLogits, TRIALS);
    assert_case(Case::CosineLoss, TRIALS);
}

#[test]
fn residual_add_and_scale_gradients() {
    assert_case(Case::AddScale, 20);
}

/// A single composite trial already probes every coordinate (>100).
#[test]
fn composite_cbr_graph() {
    assert_case(Case::CompositeCbr, 3);
}
