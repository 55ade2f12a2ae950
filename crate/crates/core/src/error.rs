use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FbError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FbError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    /// A backward call was paired with state from a different forward call.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl FbError {
    pub fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        FbError::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }

    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            FbError::Io { .. } => 3,
            FbError::Numeric(_) => 1,
            _ => 2,
        }
    }
}

pub(crate) fn dim_err<S: Into<String>>(msg: S) -> FbError {
    FbError::Dimension(msg.into())
}
