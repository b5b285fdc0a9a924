//! Experiment drivers behind the `stochlm` binary. Every command reads an
//! [`ExperimentFile`], runs its cells on the rayon pool and writes CSV files
//! into an output directory.

pub mod commands;
pub mod config;

use std::fmt;
use std::path::PathBuf;

pub use commands::{cmd_complexity, cmd_da_twin, cmd_solve, cmd_sweep, Outcome};
pub use config::{ExperimentFile, SCHEMA_VERSION};

/// Failure classes, mapped to exit codes 1 and 2.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Settings shared by all commands.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub master_seed: u64,
    pub quiet: bool,
}
