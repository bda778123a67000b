use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A ratio whose denominator is zero or otherwise outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("unknown loop {0}")]
    UnknownLoop(String),

    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    #[error("invalid pattern: {0}")]
    InvalidPattern(String),

    #[error("no offload candidates")]
    NoCandidates,

    #[error("search produced no measurable pattern")]
    NoMeasurablePattern,

    #[error("compile rejected for pattern {pattern}: {reason}")]
    CompileRejected { pattern: String, reason: String },

    #[error("measurement failed: {0}")]
    Measurement(String),

    #[error("unknown size bucket {0}")]
    UnknownSizeBucket(String),

    #[error("unknown artifact handle {0}")]
    UnknownArtifact(u64),

    #[error("unknown app {0}")]
    UnknownApp(String),

    #[error("no requests to represent")]
    NoRequests,

    #[error("device error: {0}")]
    Device(String),

    #[error("stale FPGA state: expected {expected:?} loaded, found {found:?}")]
    StaleState {
        expected: Option<String>,
        found: Option<String>,
    },

    #[error("approval channel timed out")]
    ApprovalTimeout,

    #[error("malformed log line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("command backend: {0}")]
    Command(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

pub(crate) fn read_to_string(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
