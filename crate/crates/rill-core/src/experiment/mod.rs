//! Config-driven experiments: TOML configuration, the run loop that trains
//! and evaluates over a benchmark, and resumable checkpoints.

pub mod checkpoint;
pub mod config;
pub mod runner;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{config_digest, ExperimentConfig};
pub use runner::{run, RunOptions, RunOutcome};
