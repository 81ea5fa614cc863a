//! Command-line front end for the coreset tree library: file formats,
//! subcommands and the benchmark harness.

pub mod bench;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;

pub use commands::{run, Cli};
pub use error::{CliError, CliResult};
