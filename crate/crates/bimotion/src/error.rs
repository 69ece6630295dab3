use thiserror::Error;

/// Unified error type for every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: shape mismatch: {details}")]
    Shape { op: &'static str, details: String },

    /// An operation produced NaN or infinity. Values are never propagated
    /// silently; the offending op is reported instead.
    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },

    /// An argument is outside the operation's domain.
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    /// A serialized container (weights, flow file) is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// Bad configuration file or flag combination.
    #[error("config error: {0}")]
    Config(String),

    /// Training loss stopped being finite.
    #[error("training diverged at iteration {0}: loss is non-finite")]
    Diverged(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::Shape { op, details: details.into() }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid { op, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
