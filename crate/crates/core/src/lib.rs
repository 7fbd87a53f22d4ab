pub mod arch;
pub mod augment;
pub mod byol;
pub mod dataset;
pub mod error;
pub mod fsutil;
pub mod image;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod report;
pub mod rng;
pub mod synth;
pub mod tabular;
pub mod train;
pub mod weights;

pub use arch::{ArchitectureName, ArchitectureSpec};
pub use error::{Error, Result};
pub use model::{FreezePolicy, Init, Mode, Model};
pub use weights::{ModelWeights, Provenance};
