//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any bench component.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for an op.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A shape is invalid for an op (wrong rank, odd pooling dims, ...).
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    /// Class label outside [0, num_classes).
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    /// Backward called on a non-scalar tensor.
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// A file has the wrong magic bytes for its format.
    #[error("{format}: bad magic bytes {observed:?} in {path}")]
    BadMagic {
        format: &'static str,
        path: String,
        observed: Vec<u8>,
    },

    /// A file payload is shorter than its header declares.
    #[error("{format}: truncated payload in {path}: expected {expected} bytes, got {actual}")]
    Truncated {
        format: &'static str,
        path: String,
        expected: usize,
        actual: usize,
    },

    /// Malformed header or unsupported field value in a data file.
    #[error("{format}: {reason} in {path}")]
    MalformedFile {
        format: &'static str,
        path: String,
        reason: String,
    },

    /// Invalid argument to an operation or constructor.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Invalid experiment or training configuration.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Underlying I/O failure.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for errors caused by bad inputs/configs rather than runtime failure.
    /// The CLI maps these to exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
