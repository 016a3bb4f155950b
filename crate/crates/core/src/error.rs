// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by kernels, the model, file formats and the pipeline.
#[derive(Debug, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    /// Tensor shapes do not agree.
    #[error("shape error: {0}")]
    Shape(String),
    /// An argument is outside its valid range.
    #[error("parameter error: {0}")]
    Param(String),
    /// Model input is invalid (e.g. out-of-vocabulary token).
    #[error("input error: {0}")]
    Input(String),
    /// A kernel produced NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    /// The weight container is malformed.
    #[error("weight file error: {0}")]
    Format(String),
    /// A weight blob is shorter than its header declares.
    #[error("truncated weight data: {0}")]
    Truncated(String),
    /// A JSON document does not match its schema.
    #[error("schema error at `{path}`: {message}")]
    Schema {
        /// Path to the offending field.
        path: String,
        /// What went wrong.
        message: String,
    },
    /// A requested trace entry was not recorded.
    #[error("trace error: {0}")]
    Trace(String),
    /// Filesystem failure.
    #[error("i/o error on {path}: {source}")]
    Io {
        /// File involved.
        path: PathBuf,
        /// Underlying error.
        #[source]
        source: std::io::Error,
    },
    /// JSON serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
