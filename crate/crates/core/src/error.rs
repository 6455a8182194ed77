use alloc::string::String;

use crate::numcore::Shape;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss term `{0}`")]
    NonFiniteLoss(&'static str),
    #[error("imagination diverged at step {step}: {detail}")]
    RolloutDiverged { step: usize, detail: String },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
}

/// Shorthand for `Error::InvalidArgument(format!(..))`.
#[macro_export]
macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::Error::InvalidArgument(alloc::format!($($arg)*))
    };
}
