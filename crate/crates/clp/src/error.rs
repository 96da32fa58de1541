//! Error type shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, ClpError>;

#[derive(Debug, Error)]
pub enum ClpError {
    /// Invalid configuration value or combination (exit code 2).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input record; carries the file and line it came from.
    #[error("format error at {path}:{line}: {msg}")]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Data-level problem that is not a parse failure (exit code 3).
    #[error("data error: {0}")]
    Data(String),

    /// A sampling request asked for more frames than the video can supply.
    #[error("not enough frames: required {required}, available {available}")]
    NotEnoughFrames { required: usize, available: usize },

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The memory queue does not yet hold enough elements for a dictionary
    /// split; the caller should skip the CIR term for this step.
    #[error("queue warm-up: filled {filled} of required {required}")]
    QueueWarmUp { filled: usize, required: usize },

    /// A loss or gradient became NaN/inf (exit code 4).
    #[error("non-finite value in {context}{}", diagnostics.as_ref().map(|d| format!(" ({d})")).unwrap_or_default())]
    NonFinite {
        context: String,
        diagnostics: Option<String>,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl ClpError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ClpError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        ClpError::NonFinite {
            context: context.into(),
            diagnostics: None,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            ClpError::Config(_) | ClpError::Contract(_) => 2,
            ClpError::Format { .. }
            | ClpError::Data(_)
            | ClpError::NotEnoughFrames { .. }
            | ClpError::Io { .. }
            | ClpError::Json { .. }
            | ClpError::Image { .. } => 3,
            ClpError::NonFinite { .. } => 4,
            ClpError::QueueWarmUp { .. } => 2,
        }
    }
}
