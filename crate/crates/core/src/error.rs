use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid range: [{lo}, {hi}] with upper bound {max}")]
    InvalidRange { lo: usize, hi: usize, max: usize },
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("insufficient samples: need at least {need}, got {got}")]
    InsufficientSamples { need: usize, got: usize },
    #[error("gradient linkage: {0}")]
    GradientLinkage(String),
    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: String, step: u64 },
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_check(expected: &[usize], got: &[usize]) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            expected: expected.to_vec(),
            got: got.to_vec(),
        })
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
