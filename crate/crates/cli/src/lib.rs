//! Config-driven experiment runner behind the `octmh` binary.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{execute, Evaluation, TabularKind, TabularRun};
pub use config::{Command, ExperimentConfig, ModelPreset, Overrides};
pub use error::{CliError, Result};
