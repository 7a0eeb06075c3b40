//! Configuration and subcommands behind the `sphs` binary.

pub mod commands;
pub mod config;

pub use commands::{run_subcommand, Command, Outcome};
pub use config::{emit_config, parse_config, ExperimentConfig};
