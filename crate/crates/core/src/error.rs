use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad input shape, index, or configuration value.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch for `{what}`: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("non-manifold mesh: edge ({0}, {1}) is shared by more than two faces")]
    NonManifold(usize, usize),

    #[error("point {index} is at or behind the camera (z = {z:e})")]
    BehindCamera { index: usize, z: f64 },

    /// Non-finite value or divergence during a numerical routine.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed {format} data: {msg}")]
    Format { format: &'static str, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("frame {index}: {source}")]
    Frame {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn in_frame(self, index: usize) -> Self {
        Error::Frame { index, source: Box::new(self) }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn dim(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what: what.into(),
            expected,
            got,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(format: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            format,
            msg: msg.into(),
        }
    }

    /// True for failures that come from the numbers rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Frame { source, .. } => source.is_numerical(),
            e => matches!(e, Error::Numerical(_) | Error::BehindCamera { .. }),
        }
    }
}

pub(crate) fn check_len(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::dim(what, expected, got));
    }
    Ok(())
}
