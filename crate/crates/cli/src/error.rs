use std::path::PathBuf;

use mergelab_core::Error as CoreError;

/// Failure categories, each with its own process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    /// A downstream command ran before the command that produces its input.
    #[error("missing artifact {path}: run `mergelab {producer}` first")]
    MissingArtifact { path: PathBuf, producer: &'static str },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::MissingArtifact { .. } => 3,
            CliError::Numeric(_) => 4,
            CliError::Io { .. } => 5,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) | CliError::MissingArtifact { .. } => "data",
            CliError::Numeric(_) => "numeric",
            CliError::Io { .. } => "io",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Library errors raised after the config has been validated. Remaining
/// domain errors are therefore numeric (e.g. a zero-norm representation).
impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Io { path, source } => CliError::Io { path, source },
            CoreError::Structural(_) | CoreError::Format { .. } | CoreError::Generation(_) => {
                CliError::Data(e.to_string())
            }
            CoreError::Domain(_) | CoreError::Training(_) => CliError::Numeric(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
