use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer dimensions do not line up.
    #[error("dimension mismatch in {context}: {detail}")]
    Shape { context: String, detail: String },
    /// A precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),
    /// NaN/Inf surfaced in gradients, losses or rewards.
    #[error("numeric health: {0}")]
    Numeric(String),
    /// Invalid or incomplete configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed checkpoint, dataset or config file.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            detail: detail.into(),
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($arg)*)));
        }
    };
}
pub(crate) use ensure;
