use std::path::{Path, PathBuf};

use caforge_core::Error as CoreError;
use caforge_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Other(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io { .. } => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_)
            | CoreError::Guard(_)
            | CoreError::Format(_)
            | CoreError::Csv(_)
            | CoreError::Json(_) => CliError::Config(e.to_string()),
            CoreError::Numerical { .. } => CliError::Numerical(e.to_string()),
            CoreError::Io { path, source } => CliError::Io {
                path: path.into(),
                source,
            },
            CoreError::Tensor(t) => match t {
                TensorError::Io(source) => CliError::Io {
                    path: PathBuf::from("<checkpoint>"),
                    source,
                },
                TensorError::Checkpoint(_) | TensorError::Json(_) => CliError::Config(t.to_string()),
                other => CliError::Other(other.to_string()),
            },
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(e.to_string())
    }
}
