use thiserror::Error;

/// Errors produced anywhere in the identification pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    /// The stacked regressor does not have full column rank.
    #[error(
        "regressor matrix is rank deficient (|r_{column}{column}| = {pivot:e} vs max {max_pivot:e}); \
         the training data must make rank(Phi) equal the number of baseline parameters"
    )]
    RankDeficient {
        column: usize,
        pivot: f64,
        max_pivot: f64,
    },

    #[error("insufficient data: {raw} raw samples leave no usable state for max lag {max_lag}")]
    InsufficientData { raw: usize, max_lag: usize },

    #[error("orthogonal model has no frozen theta_aux; call freeze after training")]
    MissingThetaAux,

    #[error("objective returned a non-finite value or gradient at iteration {iteration}")]
    NonFiniteObjective { iteration: usize },

    #[error("{block} block of the prediction-Jacobian Gram matrix is singular")]
    SingularGram { block: &'static str },

    #[error("D1 requires even N (got {0})")]
    OddLengthD1(usize),

    #[error("degenerate signal: noise-free output has zero standard deviation")]
    DegenerateSignal,

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        });
    }
    Ok(())
}

pub(crate) fn check_finite(context: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context))
    }
}
