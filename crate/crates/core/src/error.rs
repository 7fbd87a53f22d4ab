use std::path::{Path, PathBuf};

use octmh_tensor::TensorError;
use thiserror::Error;

use crate::metrics::MetricError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("weight file: {0}")]
    WeightFormat(String),
    /// Paths that are missing, unexpected or mis-shaped for an architecture.
    /// Only the first ten are kept; `total` counts all of them.
    #[error("weights do not fit {arch}: {total} offending path(s): {}", paths.join(", "))]
    WeightMismatch {
        arch: String,
        paths: Vec<String>,
        total: usize,
    },
    #[error("png: {0}")]
    Png(String),
    #[error("image: {0}")]
    Image(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("regression: {0}")]
    Regression(String),
    #[error("training: {0}")]
    Training(String),
    #[error("report: {0}")]
    Report(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |source| Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn json(path: &Path) -> impl FnOnce(serde_json::Error) -> Error + '_ {
        move |source| Error::Json {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Short machine-readable category, used by the command line front end.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Metric(_) => "metric",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::Csv(_) => "csv",
            Error::WeightFormat(_) => "weight_format",
            Error::WeightMismatch { .. } => "weight_mismatch",
            Error::Png(_) => "png",
            Error::Image(_) => "image",
            Error::Manifest(_) => "manifest",
            Error::Dataset(_) => "dataset",
            Error::Config(_) => "config",
            Error::Regression(_) => "regression",
            Error::Training(_) => "training",
            Error::Report(_) => "report",
        }
    }
}
