use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty file: {0}")]
    EmptyFile(PathBuf),

    #[error("file shorter than the 6-byte header: {0}")]
    FileTooShort(PathBuf),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no supervised samples available")]
    EmptySupervisedSet,

    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("checksum mismatch in feature cache")]
    Checksum,

    #[error("not a model file (bad magic)")]
    BadMagic,

    #[error("unsupported model format version {0}")]
    VersionUnsupported(u16),

    #[error("model file integrity hash mismatch")]
    HashMismatch,

    #[error("model payload does not match declared parameter counts: {0}")]
    CountMismatch(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(line: usize, message: impl Into<String>) -> Self {
        Error::Format {
            line,
            message: message.into(),
        }
    }
}
