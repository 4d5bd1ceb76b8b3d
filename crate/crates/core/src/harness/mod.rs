//! Experiment orchestration: configuration, checkpoints, the two-stage
//! trainer, the baseline suite, delay-table reporting, and the CLI's
//! workhorse functions.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod delay_table;
pub mod eval;
pub mod train;

pub use checkpoint::{load_checkpoint, parse_checkpoint, save_checkpoint};
pub use config::ExperimentConfig;
pub use train::{init_store, run_phase1_train, TrainOutcome};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {detail}")]
    Invalid { detail: String },
    #[error("unknown config key '{key}'")]
    UnknownKey { key: String },
    #[error("config value for '{key}' is malformed: {detail}")]
    BadValue { key: String, detail: String },
}

impl ConfigError {
    pub fn invalid(detail: impl Into<String>) -> Self {
        ConfigError::Invalid { detail: detail.into() }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at {stage} epoch {epoch}: {detail}")]
    Diverged { stage: &'static str, epoch: usize, detail: String },
}
