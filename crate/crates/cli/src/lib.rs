//! Command-line front end: configuration, pipeline stages and outputs.

pub mod config;
pub mod error;
pub mod manifest;
pub mod output;
pub mod pipeline;

pub use config::RunConfig;
pub use error::{CliError, Result};
pub use pipeline::{compare_files, execute, CompareArgs, Command, Overrides};
