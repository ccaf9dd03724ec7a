use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied data that violates an operation's precondition.
    #[error("input error: {0}")]
    Input(String),

    /// The noise predictor produced something unusable (non-finite output, unknown kind).
    #[error("backend fault: {0}")]
    Backend(String),

    #[error("model is frozen: {0}")]
    Frozen(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("checkpoint corrupted: {0}")]
    Corruption(String),

    #[error("{path}:{line}: {msg}")]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("gateway error: {0}")]
    Gateway(String),

    #[error("training fault at iteration {iteration}: {msg}")]
    Training { iteration: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

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

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    /// True for errors that stem from configuration or validation rather than runtime faults.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Format { .. })
    }
}
