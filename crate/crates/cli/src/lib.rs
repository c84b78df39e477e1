//! Config-driven command-line pipeline: `prepare`, `train`, `mine-pairs`
//! and `eval`.

pub mod commands;
pub mod config;
pub mod error;

pub use config::Config;
pub use error::{CliError, CliResult};
