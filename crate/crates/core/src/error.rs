use std::path::{Path, PathBuf};

/// Errors produced by the merging laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes, indexes or fingerprints of two operands disagree.
    #[error("structural mismatch: {0}")]
    Structural(String),

    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Dataset generation could not satisfy its constraints.
    #[error("generation failed: {0}")]
    Generation(String),

    /// Training produced non-finite values.
    #[error("training diverged: {0}")]
    Training(String),

    /// An on-disk artifact is malformed.
    #[error("malformed artifact {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(path: &Path, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }
}
