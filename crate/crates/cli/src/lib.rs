//! Configuration, checkpoints and workflows of the `metatrack` command.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
