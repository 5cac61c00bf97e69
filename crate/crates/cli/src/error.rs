//! CLI error type carrying the process exit code.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, bad flags, or refusal to overwrite. Exit code 2.
    #[error("config error: {0}")]
    Config(String),

    /// A run failed (numeric abort, IO while writing artifacts). Exit code 3.
    #[error("run failed: {0}")]
    Runtime(#[from] ladderlab::Error),

    /// `--assert` thresholds not met. Exit code 4.
    #[error("acceptance thresholds failed:\n{}", .0.join("\n"))]
    Assert(Vec<String>),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Assert(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(ladderlab::Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(ladderlab::Error::Json(e))
    }
}
