//! Experiment driver for the `cclis` library: configuration, runs,
//! estimator studies and exports.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{export, study, train, ExportWhat};
pub use config::{parse_config, parse_config_str, ConfigError, ExperimentConfig};
