//! Command-line surface of the few-shot pipeline: run configuration, the
//! pipeline commands and their exit codes.

pub mod commands;
pub mod config;
pub mod error;

pub use config::{Overrides, RunConfig, Stage};
pub use error::{CliError, CliResult};
