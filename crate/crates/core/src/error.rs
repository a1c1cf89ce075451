use thiserror::Error;

/// Errors raised by the estimators, oracles and training loops.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty observation sequence")]
    EmptySequence,

    #[error("missing history for step {0}")]
    MissingHistory(usize),

    #[error("degenerate particle system: every weight is zero")]
    DegenerateWeights,

    #[error("degenerate particle system at step {step}")]
    DegenerateAt { step: usize },

    #[error("proposal has zero density where the target is positive (step {step}, state {state})")]
    InvalidSupport { step: usize, state: usize },

    #[error("observation {symbol} at step {step} is outside the alphabet of size {alphabet}")]
    InvalidSymbol {
        step: usize,
        symbol: usize,
        alphabet: usize,
    },

    #[error("enumeration space of {size:e} configurations exceeds the budget of {budget}")]
    SpaceTooLarge { size: f64, budget: u64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite gradient at training step {step}")]
    NonFiniteGradient { step: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
