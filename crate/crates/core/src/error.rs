use thiserror::Error;

use crate::diff::Shape;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("state error: {0}")]
    State(String),

    #[error("numeric failure at step {step}: {detail}")]
    Numeric { step: usize, detail: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid configuration at {pointer}: {detail}")]
    Config { pointer: String, detail: String },

    #[error(transparent)]
    Container(#[from] crate::datastore::ContainerError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn shapes(op: &'static str, a: Shape, b: Shape) -> Self {
        Error::Dimension { op, detail: format!("{a} vs {b}") }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    pub(crate) fn config(pointer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config { pointer: pointer.into(), detail: detail.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
