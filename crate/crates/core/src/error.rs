use std::io;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("atom {index} has zero norm")]
    ZeroAtom { index: usize },

    #[error("non-finite objective at iteration {iteration} (last finite value {last_finite})")]
    NonFinite { iteration: usize, last_finite: f64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Short machine-readable category, used for CLI exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) | Error::Contract(_) | Error::ZeroAtom { .. } => "contract",
            Error::Config(_) => "config",
            Error::NonFinite { .. } => "numerical",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
