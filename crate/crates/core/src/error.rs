use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or weight extent does not match what the operation requires.
    #[error("shape mismatch in {op}: {dim} expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("insufficient temporal context in {op}: need at least {required} frames, got {actual}")]
    InsufficientContext {
        op: &'static str,
        required: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration key `{key}` in section [{section}]")]
    UnknownKey { section: String, key: String },

    #[error("backward called on {0} without a preceding training-mode forward (stale cache)")]
    StaleCache(&'static str),

    #[error("{op} is not available in {mode} mode")]
    Mode { op: &'static str, mode: &'static str },

    #[error("label {label} out of range for {classes} classes at frame {frame}")]
    LabelOutOfRange { label: usize, classes: usize, frame: usize },

    #[error("stream {stream} has dilation {dilation}, which is not a multiple of the sub-sampling rate {rate}")]
    NotGridAligned {
        stream: usize,
        dilation: usize,
        rate: usize,
    },

    #[error("unusable audio: {0}")]
    Audio(String),

    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: u64, value: f64 },

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
