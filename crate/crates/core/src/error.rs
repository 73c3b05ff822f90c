use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Validation(String),
    #[error("degenerate rotation: {0}")]
    DegenerateRotation(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("training diverged at block {block}, iteration {iteration}: non-finite {component} loss")]
    Divergence { block: usize, iteration: usize, component: String },
    #[error("format: {0}")]
    Format(#[from] FormatError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Container decoding failures, one variant per failure class.
#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic bytes, expected {expected:?}")]
    BadMagic { expected: String },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("layout mismatch: {0}")]
    Layout(String),
    #[error("malformed header: {0}")]
    Header(String),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable category used on the command line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Validation(_) | Error::DegenerateRotation(_) => "validation",
            Error::Config(_) => "config",
            Error::Divergence { .. } => "divergence",
            Error::Format(FormatError::VersionMismatch { .. }) => "format-version",
            Error::Format(FormatError::Truncated { .. }) => "format-truncated",
            Error::Format(FormatError::Layout(_)) => "format-layout",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit status: 1 validation, 2 training divergence, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::DegenerateRotation(_) | Error::Config(_) => 1,
            Error::Divergence { .. } => 2,
            Error::Format(_) | Error::Io { .. } => 3,
        }
    }
}
