use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown emotion '{name}'; valid emotions: {valid}")]
    UnknownEmotion { name: String, valid: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing parameter '{0}'")]
    MissingParam(String),

    #[error("image {what}: expected {expected}, got {got}")]
    ImageSize {
        what: String,
        expected: String,
        got: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("gradient check failed for: {0}")]
    GradCheck(String),

    #[error(
        "probe accuracy {accuracy:.3} is below the {gate:.2} gate; metrics would be meaningless"
    )]
    ProbeGate { accuracy: f64, gate: f64 },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("file truncated while reading {0}")]
    Truncated(String),
    #[error("integrity check failed for '{0}'")]
    Integrity(String),
    #[error("unknown dtype tag {0}")]
    DType(u8),
    #[error("tensor '{name}' has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing entry '{0}'")]
    Missing(String),
    #[error("malformed entry '{0}'")]
    Malformed(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Errors caused by bad user input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::UnknownEmotion { .. }
                | Error::InvalidArgument(_)
                | Error::ImageSize { .. }
                | Error::Manifest { .. }
                | Error::Config { .. }
        )
    }
}
