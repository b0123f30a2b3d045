use std::fmt;

/// Errors produced by the numeric kernels, the Bayesian linear model fits
/// and the variational network machinery.
#[derive(Debug)]
pub enum Error {
    /// A matrix required to be symmetric positive definite failed a pivot check,
    /// even after the one-shot jitter retry where that policy applies.
    NotPositiveDefinite,
    /// A matrix required to be symmetric (within 1e-10) is not.
    NotSymmetric,
    /// Patch-extraction geometry is inconsistent with the supplied tensor.
    GeometryMismatch(String),
    /// Operand shapes do not line up.
    ShapeMismatch(String),
    /// An operation specific to one layer kind was called on the other.
    KindMismatch,
    /// A label row does not sum to one.
    BadOneHot { row: usize },
    /// A network failed a structural invariant at construction.
    InvalidNetwork(String),
    /// The loss evaluated to NaN or infinity.
    NonFiniteLoss,
    /// A gradient entry is NaN or infinite.
    NonFiniteGradient,
    /// No mini-batch can be formed from the dataset.
    DatasetTooSmall,
    /// Matrix construction from user input saw a NaN or infinite entry.
    NonFiniteInput { index: usize },
    /// A checkpoint file could not be read or did not match the expected layout.
    Checkpoint(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NotPositiveDefinite => write!(f, "matrix is not positive definite"),
            Error::NotSymmetric => write!(f, "matrix is not symmetric within 1e-10"),
            Error::GeometryMismatch(msg) => write!(f, "patch geometry mismatch: {msg}"),
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::KindMismatch => write!(f, "operation does not apply to this layer kind"),
            Error::BadOneHot { row } => write!(f, "label row {row} does not sum to 1"),
            Error::InvalidNetwork(msg) => write!(f, "invalid network: {msg}"),
            Error::NonFiniteLoss => write!(f, "loss is not finite"),
            Error::NonFiniteGradient => write!(f, "gradient is not finite"),
            Error::DatasetTooSmall => write!(f, "dataset has no rows to batch"),
            Error::NonFiniteInput { index } => {
                write!(f, "non-finite entry at flat index {index}")
            }
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
