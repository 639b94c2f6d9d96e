//! Experiment harness for the chaos-backbone models: dataset management,
//! checkpoints, the sweep runner, figure-style exports, and the CLI
//! plumbing behind the `chaosdnn` binary.

pub mod checkpoint;
pub mod config;
pub mod csvio;
pub mod datasets;
pub mod experiments;
pub mod figures;
pub mod svg;
pub mod sweep;

use std::fmt;

/// Process exit codes used by the binary.
pub mod exit_codes {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const DIVERGED: i32 = 4;
}

#[derive(Debug)]
pub enum CliError {
    Core(chaosdnn_core::Error),
    Io(std::io::Error),
    Json(serde_json::Error),
    Config(String),
    Data(String),
    /// A sweep finished but produced nothing except divergences.
    DivergedOnly,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "io error: {e}"),
            CliError::Json(e) => write!(f, "json error: {e}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::DivergedOnly => write!(f, "all sweep cells diverged"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Json(_) => exit_codes::CONFIG,
            CliError::Data(_) | CliError::Io(_) => exit_codes::DATA,
            CliError::DivergedOnly => exit_codes::DIVERGED,
            CliError::Core(chaosdnn_core::Error::InvalidArgument(_)) => exit_codes::CONFIG,
            CliError::Core(chaosdnn_core::Error::Parse { .. }) => exit_codes::DATA,
            CliError::Core(_) => 1,
        }
    }
}

impl From<chaosdnn_core::Error> for CliError {
    fn from(e: chaosdnn_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Json(e)
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
