//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! The layer set covers what small convolutional classifiers need: 2-D
//! convolution, batch normalization, max and global-average pooling, dense
//! layers, ReLU and sigmoid, plus the binary cross-entropy and cosine
//! objectives. Everything is generic over [`Scalar`] so that the same graph
//! code runs in `f32` for training and `f64` for gradient verification.
//!
//! ```
//! use octmh_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
//! let w = g.param(Tensor::new(vec![1, 2], vec![0.5, -0.25]).unwrap());
//! let y = g.dense(x, w, None).unwrap();
//! let loss = g.bce_with_logits(y, &[1.0]).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(w).unwrap().len(), 2);
//! ```

mod adam;
mod error;
mod gradcheck;
mod graph;
pub mod ops;
pub mod par;
pub mod suite;
mod scalar;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use graph::{BatchNormMode, BatchStats, Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;
