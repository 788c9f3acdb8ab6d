//! Command-line front end: run configuration, field expressions, result
//! files and subcommand dispatch.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 failed checks in `verify`.

pub mod commands;
pub mod config;
pub mod error;
pub mod expr;
pub mod output;

pub use commands::{compute, execute, main_with};
pub use config::RunConfig;
pub use error::CliError;
