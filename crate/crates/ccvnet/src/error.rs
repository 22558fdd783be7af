use std::path::{Path, PathBuf};

/// Failures of the command-line workflow, each with a stable exit code.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    State(String),
    #[error("{path}: byte {offset}: {reason}")]
    Parse {
        path: PathBuf,
        offset: usize,
        reason: String,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, AppError>;

impl AppError {
    /// 2 configuration or missing state, 3 data, 4 numeric abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) | AppError::State(_) => 2,
            AppError::Data(_) | AppError::Parse { .. } | AppError::Io { .. } => 3,
            AppError::Numeric(_) => 4,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Attaches a file path to a core error.
    pub fn at(path: &Path, e: ccvnet_core::Error) -> Self {
        match e {
            ccvnet_core::Error::Format { offset, reason } => AppError::Parse {
                path: path.to_path_buf(),
                offset,
                reason,
            },
            other => AppError::from(other).prefixed(&path.display().to_string()),
        }
    }

    fn prefixed(self, prefix: &str) -> Self {
        match self {
            AppError::Config(m) => AppError::Config(format!("{prefix}: {m}")),
            AppError::Data(m) => AppError::Data(format!("{prefix}: {m}")),
            AppError::Numeric(m) => AppError::Numeric(format!("{prefix}: {m}")),
            AppError::State(m) => AppError::State(format!("{prefix}: {m}")),
            other => other,
        }
    }
}

impl From<ccvnet_core::Error> for AppError {
    fn from(e: ccvnet_core::Error) -> Self {
        use ccvnet_core::Error as E;
        match e {
            E::Config(_) => AppError::Config(e.to_string()),
            E::Dimension { .. } | E::Data(_) => AppError::Data(e.to_string()),
            E::Numeric(_) => AppError::Numeric(e.to_string()),
            E::State(_) => AppError::State(e.to_string()),
            E::Format { offset, reason } => AppError::Parse {
                path: PathBuf::new(),
                offset,
                reason,
            },
        }
    }
}
