//! Library half of the `sliceout` command: config files, datasets and the
//! four subcommands.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;

pub use error::{CliError, CliResult};
