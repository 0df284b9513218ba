use std::path::Path;

use thiserror::Error;

/// Failures of one run, split by the exit code they map to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    /// A core error raised while handling `path`.
    pub fn at(path: &Path, err: privada_core::Error) -> Self {
        match err {
            privada_core::Error::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => CliError::Runtime(format!("{}: {other}", path.display())),
        }
    }
}

impl From<privada_core::Error> for CliError {
    fn from(err: privada_core::Error) -> Self {
        match err {
            privada_core::Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
