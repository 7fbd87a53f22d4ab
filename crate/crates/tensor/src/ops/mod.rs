//! Raw forward/backward kernels on flat NCHW buffers.
//!
//! These do no autodiff bookkeeping; [`crate::Graph`] wires them together.

pub mod activation;
pub mod conv;
pub mod dense;
pub mod loss;
pub mod norm;
pub mod pool;
