//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not conform for the requested operation.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Operation received a tensor of the wrong dtype (real vs complex).
    #[error("{op}: dtype mismatch: {detail}")]
    Dtype { op: &'static str, detail: String },

    /// Axis argument outside the tensor's rank.
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    /// Numerical failure: non-finite values, non-positive-definite input,
    /// zero norm where a direction is required, and similar.
    #[error("{op}: numeric error: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// Misuse of the autodiff API (e.g. backward from a non-scalar).
    #[error("autodiff usage error: {0}")]
    Usage(String),

    /// Invalid experiment configuration.
    #[error("config error: field `{field}`: {detail}")]
    Config { field: String, detail: String },

    /// Manifest or checkpoint metadata failed validation.
    #[error("manifest error: field `{field}`: {detail}")]
    Manifest { field: String, detail: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn dtype(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dtype {
            op,
            detail: detail.into(),
        }
    }

    pub fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub fn manifest(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Manifest {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
