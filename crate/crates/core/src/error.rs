use alloc::string::String;

/// Errors produced by the numerical core.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not conform.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// Input values outside their documented domain.
    #[error("invalid input: {0}")]
    Input(String),
    /// Configuration violates an invariant.
    #[error("invalid config: {0}")]
    Config(String),
    /// API used in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
