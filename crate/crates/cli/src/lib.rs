//! Configuration, orchestration and artifact output for the `waffle` command.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod runner;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use runner::{count_params, load_config, run_experiment, run_mia, run_sweep, RunOutcome};
