use std::path::PathBuf;

use thiserror::Error;

/// Failures raised by tensor construction and tape operations.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum TensorError {
    /// Input shapes are incompatible with the requested operation.
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    /// A NaN or infinity appeared in a leaf or an operation output.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    /// The call violated an operation precondition (e.g. non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape {
            op,
            detail: detail.into(),
        }
    }
}

/// Failures raised while reading a checkpoint or dataset file.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("file truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed content: {0}")]
    Malformed(String),
}

/// Crate-level error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("chain diverged at step {step}")]
    Divergence { step: usize },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_) | Error::Contract(_) => 2,
            Error::Tensor(TensorError::Shape { .. } | TensorError::Contract(_)) => 2,
            Error::Tensor(TensorError::NonFinite(_)) | Error::Divergence { .. } => 3,
            Error::Format { .. } | Error::Io { .. } => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
