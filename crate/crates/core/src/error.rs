use alloc::string::String;

/// Failures surfaced by the registration core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    /// Raised by the gradient checker when the sampled instance has nearly
    /// repeated singular values; the caller should draw a new instance.
    #[error("ill-conditioned instance: {0}")]
    IllConditioned(String),
    #[error("non-finite loss at epoch {epoch}, pair {pair}, iteration {iteration}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        pair: usize,
        iteration: usize,
        detail: String,
    },
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(alloc::format!($($arg)*))
    };
}
pub(crate) use invalid;
