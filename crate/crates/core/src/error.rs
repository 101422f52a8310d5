use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    /// The on-disk store does not match its declared format.
    #[error("store format: {0}")]
    Format(String),

    /// An input violates a documented invariant.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Linear algebra or optimisation failed (singular matrix, divergence).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A scripted information profile cannot be realised.
    #[error("unachievable under MMI: {0}")]
    Unachievable(String),

    /// Wraps an error with the pipeline stage (layer, modality) it came from.
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code used by the CLI: 2 for validation failures, 3 for
    /// numeric failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Format(_)
            | Error::Invalid(_)
            | Error::Dimension(_)
            | Error::Unachievable(_)
            | Error::Json { .. } => 2,
            Error::Numeric(_) => 3,
            _ => 1,
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn context(self, ctx: impl FnOnce() -> String) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context(self, ctx: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| e.context(ctx()))
    }
}
