//! Command-line front end for open-world semi-supervised experiments.
//!
//! The `owssl` binary is a thin wrapper over [`commands`]; everything it
//! writes can also be produced by calling these functions directly.

pub mod commands;
pub mod config;

pub use commands::SweepAxis;
pub use config::ExperimentConfig;

/// Version of the JSON files written by the commands.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// The configuration or a command-line value is unusable.
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<owssl_core::Error> for CliError {
    fn from(e: owssl_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
