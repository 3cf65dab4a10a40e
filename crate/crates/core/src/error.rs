use std::path::PathBuf;

/// Errors produced by the search pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("prefix length {len} must be in 1..{max_len}")]
    Length { len: usize, max_len: usize },
    #[error("span {start}..{end} outside sequence of length {len}")]
    Span { start: usize, end: usize, len: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("config error: {0}")]
    Config(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("grouping error: {0}")]
    Grouping(String),
    #[error("missing upstream artifact {}: run `{stage}` first", path.display())]
    MissingDependency { path: PathBuf, stage: &'static str },
    #[error("artifact {} was produced under config hash {found}, expected {expected}", path.display())]
    HashMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("malformed file {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    #[error("output directory is locked by another run: {}", .0.display())]
    Locked(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Whether the error stems from invalid input or configuration rather
    /// than a failure while computing.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::MissingDependency { .. }
                | Error::HashMismatch { .. }
                | Error::Locked(_)
                | Error::InvalidArgument(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
