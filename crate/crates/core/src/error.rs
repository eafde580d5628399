use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the solver, loaders and trainer.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid hyperparameter, interval or other user-supplied setting.
    #[error("configuration error: {0}")]
    Config(String),

    /// Array shapes that do not line up.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// Malformed input values (non-finite data, bad labels, non-positive weights).
    #[error("invalid input: {0}")]
    Input(String),

    /// A NaN, infinity or underflow to zero surfaced during the computation.
    #[error("numerical failure{}: {message}", .step.map(|k| format!(" at step {k}")).unwrap_or_default())]
    Numerical { message: String, step: Option<u64> },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file that was read but could not be parsed.
    #[error("malformed file {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn numerical(message: impl Into<String>) -> Self {
        Error::Numerical {
            message: message.into(),
            step: None,
        }
    }

    pub(crate) fn dimension(
        context: &'static str,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Attach the proximal step index to a numerical failure.
    pub fn at_step(self, k: u64) -> Self {
        match self {
            Error::Numerical { message, .. } => Error::Numerical {
                message,
                step: Some(k),
            },
            other => other,
        }
    }

    /// Process exit code used by the command-line runner.
    ///
    /// 2 configuration, 3 numerical failure, 4 I/O. Shape and input errors count
    /// as configuration errors; unparsable files count as I/O errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension { .. } | Error::Input(_) => 2,
            Error::Numerical { .. } => 3,
            Error::Io { .. } | Error::Parse { .. } => 4,
        }
    }
}
