use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to load sample `{id}`: {reason}")]
    Load { id: String, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for command-line front ends.
    ///
    /// `0` is success; validation and configuration problems map to `1`,
    /// filesystem problems to `2` and numeric failures to `3`.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Load { .. } => 2,
            Error::Numeric(_) => 3,
            _ => 1,
        }
    }
}
