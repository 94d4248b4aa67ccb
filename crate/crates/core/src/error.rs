use std::fmt;

/// Error type shared by every module of the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("timestep {t} out of range [0, {len})")]
    TimestepOutOfRange { t: usize, len: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric divergence: {0}")]
    NonFinite(String),
    #[error("client transport failure: {0}")]
    Transport(String),
    #[error("digest mismatch: {0}")]
    DigestMismatch(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, mapped onto process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Transport,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => ErrorClass::Config,
            Error::NonFinite(_) => ErrorClass::Numeric,
            Error::Transport(_) => ErrorClass::Transport,
            Error::ShapeMismatch { .. }
            | Error::TimestepOutOfRange { .. }
            | Error::Data(_)
            | Error::DigestMismatch(_)
            | Error::Format(_)
            | Error::Io(_) => ErrorClass::Data,
        }
    }

    pub(crate) fn invalid(msg: impl fmt::Display) -> Self {
        Error::InvalidArgument(msg.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
