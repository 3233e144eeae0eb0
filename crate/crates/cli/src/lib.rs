//! Experiment driver for `rifle-core`: JSON configs, CSV datasets and
//! deterministic telemetry output.

pub mod commands;
pub mod config;
pub mod csvio;
pub mod error;

pub use commands::{cmd_grad_probe, cmd_make_data, cmd_oracle, cmd_train, RunOptions};
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
