use std::path::PathBuf;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Divergence, bound violation or gradient-check failure.
    #[error("{0}")]
    Numerical(String),

    #[error(transparent)]
    Core(#[from] acfr_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 1 usage or configuration problems, 2 numerical failures.
    pub fn exit_code(&self) -> i32 {
        use acfr_core::Error as E;
        match self {
            CliError::Numerical(_) => 2,
            CliError::Core(E::Divergence { .. } | E::NonFinite(_)) => 2,
            _ => 1,
        }
    }
}
