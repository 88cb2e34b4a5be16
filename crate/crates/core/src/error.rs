use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every layer of the library.
#[derive(Debug, Error)]
pub enum CsnError {
    #[error("dimension error in `{op}`: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by `{op}`")]
    Numeric { op: &'static str },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("finite-difference oracle invalid: {0}")]
    OracleInvalid(String),

    #[error("task description is empty")]
    EmptyDescription,

    #[error("sampler error: {0}")]
    Sampler(String),

    #[error("loader error at row {row}: {detail}")]
    Loader { row: usize, detail: String },

    #[error("format error in {what}: expected {expected}, found {found}")]
    Format {
        what: String,
        expected: String,
        found: String,
    },

    #[error("training diverged at episode {episode} (episode seed {seed}): {detail}")]
    NanLoss { episode: usize, seed: u64, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CsnError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        CsnError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CsnError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code under the CLI contract: 2 for configuration problems,
    /// 3 for numeric failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CsnError::Config(_) | CsnError::Format { .. } => 2,
            CsnError::Numeric { .. } | CsnError::NanLoss { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CsnError>;
