//! Configuration, run records and subcommand implementations behind the `tubekit` binary.

pub mod commands;
pub mod config;
pub mod error;

pub use config::{ExperimentConfig, Overrides};
pub use error::{CliError, Result};
