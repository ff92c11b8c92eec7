//! Library half of the `chatty` binary: config parsing, commands and plots.

pub mod commands;
pub mod config;
pub mod plot;

use std::fmt;

/// Exit codes shared by every subcommand.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const NON_FINITE: i32 = 3;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    /// Bad configuration or arguments.
    Config(String),
    /// Training produced a non-finite loss.
    NonFinite(String),
    /// Any other failure, including failed verification.
    Failed(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn failed(msg: impl Into<String>) -> Self {
        CliError::Failed(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::NonFinite(_) => exit::NON_FINITE,
            CliError::Failed(_) => exit::FAILURE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::NonFinite(m) => write!(f, "training diverged: {m}"),
            CliError::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<chatty_core::Error> for CliError {
    fn from(e: chatty_core::Error) -> Self {
        match e {
            chatty_core::Error::NonFinite { .. } => CliError::NonFinite(e.to_string()),
            chatty_core::Error::Param { .. } => CliError::Config(e.to_string()),
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failed(format!("i/o error: {e}"))
    }
}
