use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every layer of the pipeline.
///
/// The CLI maps each variant onto a process exit code through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("query outside the feature grid: {0}")]
    OutOfField(String),

    #[error("non-finite value in `{name}`: {detail}")]
    Numeric { name: String, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {detail}")]
    Format { path: PathBuf, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric { name: name.into(), detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }

    /// 0 success, 2 config error, 3 numeric failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 2,
            Error::Numeric { .. } | Error::OutOfField(_) => 3,
            Error::Io { .. } | Error::Format { .. } => 4,
        }
    }
}
