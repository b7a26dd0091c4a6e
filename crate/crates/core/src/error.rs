use alloc::string::String;

/// Failure modes shared by every operation in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible with the operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// An operation produced NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    /// Eval-mode batch normalization was requested before any statistics were recorded.
    #[error("normalization statistics are uninitialized")]
    UninitializedStatistics,
    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),
    /// Client payloads disagree on array names or shapes.
    #[error("protocol error: {0}")]
    Protocol(String),
    /// Aggregation weights or byte counts do not add up.
    #[error("accounting error: {0}")]
    Accounting(String),
    /// A binary container could not be decoded.
    #[error("decode error: {0}")]
    Decode(crate::container::DecodeError),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, detail: String) -> Error {
    Error::Dimension { op, detail }
}
