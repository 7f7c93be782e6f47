use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input too short: {len} samples, need at least {needed}")]
    InputTooShort { len: usize, needed: usize },

    #[error("invalid STFT configuration: {0}")]
    InvalidStft(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("cardinality mismatch in {context}: expected {expected}, got {actual}")]
    CardinalityMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("mask value {value} at ({row}, {col}) outside [0, 1]")]
    MaskOutOfRange { row: usize, col: usize, value: f64 },

    #[error("estimator contract violation: {0}")]
    ContractViolation(String),

    #[error("permutation search too large: {size} items exceeds bound {bound}")]
    PermutationSearchTooLarge { size: usize, bound: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("estimator used before reset_block supplied a block context")]
    MissingContext,

    #[error("infeasible overlap_ratio: asked for {requested:.3}, achievable range is [{min:.3}, {max:.3}]")]
    InfeasibleOverlap { requested: f64, min: f64, max: f64 },

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("block dependency requires sequential processing, got {0}")]
    DependencyRequiresSequential(&'static str),

    #[error("unsupported wav: {0}")]
    UnsupportedWav(String),

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: (usize, usize), actual: (usize, usize)) -> Self {
        Error::ShapeMismatch {
            context,
            expected,
            actual,
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

pub(crate) fn check_shape(context: &'static str, expected: (usize, usize), actual: (usize, usize)) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::shape(context, expected, actual))
    }
}
