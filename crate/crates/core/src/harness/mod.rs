//! Training, checkpointing and experiment plumbing.

pub mod ablate;
pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod train;

pub use config::ExperimentConfig;
pub use train::{train, TrainOptions, TrainOutcome};
