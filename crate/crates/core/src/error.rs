use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: empty input")]
    Empty { op: &'static str },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("loss is detached from every gradient-carrying leaf")]
    Detached,

    #[error("invalid value for `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{0}")]
    Invalid(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("training diverged at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
