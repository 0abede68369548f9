use std::io;
use std::path::Path;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input value or configuration field is outside its allowed domain.
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    /// Tensor or image dimensions do not agree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A file could be read but its contents are malformed.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    /// NaN/Inf or divergence during a numerical procedure.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("autodiff: {0}")]
    Graph(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }

    /// I/O error annotated with the path it concerns.
    pub fn io_at(path: &Path, e: io::Error) -> Self {
        Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Process exit code for the command-line driver: 1 validation, 2
    /// numerical failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Shape(_) | Error::Graph(_) => 1,
            Error::Numerical(_) => 2,
            Error::Io(_) | Error::Format { .. } | Error::Json(_) => 3,
        }
    }
}
