use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: {dim} mismatch: expected {expected}, got {actual}")]
    DimMismatch {
        op: &'static str,
        dim: String,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("bce_with_logits: target {value} at index {index} is not 0 or 1")]
    InvalidTarget { index: usize, value: f64 },

    #[error("{op}: zero-norm vector at row {row}")]
    ZeroNorm { op: &'static str, row: usize },

    #[error("backward: loss must have exactly one element, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("adam: missing gradient for parameter {0}")]
    MissingGradient(usize),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
}

impl TensorError {
    pub fn dim(op: &'static str, dim: impl Into<String>, expected: usize, actual: usize) -> Self {
        TensorError::DimMismatch {
            op,
            dim: dim.into(),
            expected,
            actual,
        }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::InvalidArgument { op, msg: msg.into() }
    }
}
