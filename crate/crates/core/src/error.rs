use thiserror::Error;

/// Errors surfaced by every layer of the crate.
#[derive(Debug, Error)]
pub enum RevarError {
    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("singular design matrix: column {column} is linearly dependent on earlier columns")]
    Singular { column: usize },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data in {path}: {message}")]
    Format { path: String, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl RevarError {
    /// Process exit status for the command-line driver: 2 for bad
    /// configuration or incompatible inputs, 3 for numerical failure, 4 for
    /// file-system and file-format problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            RevarError::Divergence { .. } | RevarError::Singular { .. } => 3,
            RevarError::Io { .. } | RevarError::Format { .. } => 4,
            _ => 2,
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        RevarError::Param(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        RevarError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, RevarError>;
