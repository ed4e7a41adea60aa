//! Command-line front end: TOML experiment configs, flag overrides and the
//! subcommand implementations behind the `mlab` binary.

pub mod commands;
pub mod config;
pub mod error;

pub use error::{CliError, Result};
