//! Configuration parsing and subcommands for the `textate` binary.

pub mod commands;
pub mod config;

pub use commands::{execute, execute_text, CliError, Command, Overrides, RunManifest};
pub use config::{parse_config, ProviderKind, RunConfig};
