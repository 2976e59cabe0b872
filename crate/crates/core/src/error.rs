use thiserror::Error;

/// Errors raised by the library. The CLI maps these onto process exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error("invalid latent: {0}")]
    InvalidLatent(String),
    #[error("unknown condition: {0}")]
    Condition(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("metric `{metric}` unsupported: {reason}")]
    MetricUnsupported { metric: &'static str, reason: String },
    #[error("singularity: {0}")]
    Singularity(String),
    #[error("numeric divergence at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },
    #[error("replay error: {0}")]
    Replay(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code: 2 for configuration or input problems, 3 for
    /// numeric failure, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } | Error::Singularity(_) | Error::InvalidLatent(_) => 3,
            Error::Io { .. } => 4,
            _ => 2,
        }
    }

    pub(crate) fn shape(expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
