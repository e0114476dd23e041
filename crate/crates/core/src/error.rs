//! Error type shared across the crate.

use std::path::PathBuf;

/// Errors produced by the library.
///
/// The CLI maps these onto process exit codes: configuration and contract
/// problems exit 2, I/O and file-format problems exit 3, numeric aborts
/// (non-finite losses or gradients) exit 4.
#[derive(Debug, thiserror::Error)]
pub enum RoseError {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A signal or feature map is too short for the requested operation.
    #[error("length error: {0}")]
    Length(String),

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// An API contract was violated (wrong feature kind, backward reuse, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A file did not match its expected on-disk format.
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// Input signal is degenerate for the requested operation (e.g. silent).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Training produced a non-finite value; aborted with context.
    #[error("numeric abort: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl RoseError {
    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        RoseError::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, RoseError>;
