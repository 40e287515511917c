//! Experiment runner: configuration, registry, drivers and artifact output.

pub mod config;
pub mod error;
pub mod experiments;
pub mod output;
pub mod registry;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
pub use experiments::{run_experiment, ExperimentOutput, Table, Verdict};
pub use registry::{ExperimentInfo, REGISTRY};
