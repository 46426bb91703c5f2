use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: invalid argument: {detail}")]
    Invalid { op: &'static str, detail: String },

    #[error("malformed {what} at byte {offset}: {detail}")]
    Format {
        what: &'static str,
        offset: usize,
        detail: String,
    },

    #[error("non-finite value in {what}: {detail}")]
    NonFinite { what: &'static str, detail: String },

    #[error("{op}: backward called before forward")]
    NoForward { op: &'static str },

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid { .. } => 1,
            Error::NonFinite { .. } => 3,
            _ => 2,
        }
    }
}
