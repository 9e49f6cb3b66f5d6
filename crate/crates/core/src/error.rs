use std::path::PathBuf;

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad shapes, ranges or arguments.
    #[error("validation error: {0}")]
    Validation(String),

    /// Configuration rejected; `keys` names every offending key.
    #[error("invalid configuration ({}): {message}", keys.join(", "))]
    Config { keys: Vec<String>, message: String },

    /// Malformed dense-array container.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("dtype mismatch: expected {expected}, found {found}")]
    DtypeMismatch { expected: &'static str, found: &'static str },

    /// A loss term (or gradient) became NaN/Inf.
    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    /// Checkpoint and runtime configuration disagree.
    #[error("checkpoint incompatible with configuration; differing keys: {}", keys.join(", "))]
    CheckpointMismatch { keys: Vec<String> },

    #[error("refused: {0}")]
    Refused(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Self::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Process exit code: 2 for numerical aborts, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::NonFinite { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
