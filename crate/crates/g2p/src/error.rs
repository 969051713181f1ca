use std::path::PathBuf;

/// Errors of the command-line pipeline. Each variant maps onto one process
/// exit status.
#[derive(Debug, thiserror::Error)]
pub enum Error {
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
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {message}")]
    InFile { path: PathBuf, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] g2p_core::Error),
    #[error("internal: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn parse(line: usize, message: String) -> Self {
        Error::Parse { line, message }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches a file name to parse errors.
    pub fn in_file(self, path: impl Into<PathBuf>) -> Self {
        match self {
            Error::Parse { line, message } => Error::InFile {
                path: path.into(),
                message: format!("line {line}: {message}"),
            },
            other => other,
        }
    }

    /// 1 usage or config, 2 data, 3 internal invariant.
    pub fn exit_code(&self) -> i32 {
        use g2p_core::Error as M;
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::Io { .. } | Error::Parse { .. } | Error::InFile { .. } | Error::Checkpoint(_) => 2,
            Error::Model(M::InvalidConfig(_) | M::InvalidSynthConfig(_) | M::InvalidFoldCount(_)) => 1,
            Error::Model(M::Shape { .. } | M::TensorData { .. } | M::MissingGradient(_) | M::DuplicateParameter(_)) => {
                3
            }
            Error::Model(_) => 2,
            Error::Internal(_) => 3,
        }
    }
}
