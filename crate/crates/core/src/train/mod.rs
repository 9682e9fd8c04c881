//! Configuration, optimiser, checkpoints and the training loop.

pub mod checkpoint;
pub mod config;
pub mod optim;
mod trainer;

pub use config::{RunConfig, DATA_ROOT_ENV};
pub use trainer::{build_model, load_model, EpochReport, StepReport, Trainer};
