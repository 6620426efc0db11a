use std::path::PathBuf;

/// Errors produced anywhere in the attack pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate vector in cosine similarity (norm {norm:e} below 1e-12)")]
    DegenerateVector { norm: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },

    #[error("{path}: unsupported image format: {detail}")]
    UnsupportedFormat { path: PathBuf, detail: String },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("judge scoring failed: {0}")]
    Scoring(String),

    #[error("attack failed at iteration {iteration} (stage {stage}): {source}")]
    Attack {
        iteration: usize,
        stage: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io { path: path.into(), message: err.to_string() }
    }
}
