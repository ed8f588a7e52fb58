//! Library side of the `cama` command-line tool. Each subcommand is a plain
//! function so it can be driven from tests as well as from `main`.

pub mod commands;
pub mod config;
pub mod error;
mod output;

pub use config::RunConfig;
pub use error::CliError;
pub use output::{resolve_inputs, write_json, SequenceInput};
