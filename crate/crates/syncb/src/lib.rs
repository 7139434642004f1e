//! Command-line tool, file formats and HTTP service around `syncb-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod experiment;
pub mod report;
pub mod server;

pub use error::{CliError, CliResult};
