//! Crate-wide error type.

/// Errors surfaced by network construction, data handling, and the harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A constructor or operation argument violates its contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor extents do not satisfy an operation's precondition.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Dataset layout or content problem (missing pairs, bad masks, ...).
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Malformed or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint could not be written, read, or matched to a model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted because the loss left the finite range.
    #[error("loss became non-finite at step {step} (value {value})")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
