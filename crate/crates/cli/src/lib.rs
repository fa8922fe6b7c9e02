//! Library side of the `qphase` binary, so the commands can be driven from tests.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use config::{resolve, Preset, RunConfig};
pub use error::CliError;
pub use output::Output;
