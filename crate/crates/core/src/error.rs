use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A documented precondition of an operation does not hold.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A reduction was asked to average over zero valid pixels.
    #[error("no valid pixels: {0}")]
    NoValidPixels(String),
    #[error("invalid update schedule: {0}")]
    Schedule(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(alloc::format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
