//! Command-line front end for nonlinear quantile mixed models.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod output;
pub mod predict;

pub use commands::{execute, Cli};
pub use error::{CliError, CliResult, EXIT_INPUT, EXIT_NUMERICAL, EXIT_OK};
