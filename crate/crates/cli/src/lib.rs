//! Library surface of the experiment runner: configuration handling and the
//! runners themselves, callable from tests as plain functions.

pub mod config;
pub mod error;
pub mod runners;

pub use config::{default_config, resolve_config, ExperimentConfig, ExperimentKind};
pub use error::{CliError, CliResult};
