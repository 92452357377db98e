use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("flow direction: {0}")]
    FlowDirection(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("manifest not found in {}", .0.display())]
    ManifestNotFound(PathBuf),

    #[error("corrupt or missing data file {}: {reason}", .path.display())]
    CorruptFile { path: PathBuf, reason: String },

    #[error("unsupported format version {found} in {} (expected {expected})", .path.display())]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("io error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => ErrorKind::Usage,
            Error::NonFinite(_) => ErrorKind::Numerical,
            Error::ShapeMismatch(_)
            | Error::FlowDirection(_)
            | Error::ManifestNotFound(_)
            | Error::CorruptFile { .. }
            | Error::Version { .. }
            | Error::Io { .. } => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::CorruptFile {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
