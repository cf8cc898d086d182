//! Command-line front end: layered configuration and one runner per pipeline stage.

pub mod app;
pub mod commands;
pub mod config;

pub use app::run;
pub use commands::{run_command, CliError};
pub use config::{resolve_config, RunConfig};
