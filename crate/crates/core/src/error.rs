use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("jump coefficient {value} at t={t} for atom {atom} must exceed -1")]
    JumpCoefficient { atom: usize, t: f64, value: f64 },

    #[error("stochastic exponential is ill-conditioned: max/min ratio {ratio:e}")]
    IllConditioned { ratio: f64 },

    #[error("singular regression matrix at step {step}")]
    SingularRegression { step: usize },

    #[error("too few paths for regression: {paths} paths, {basis} basis functions (need at least 10x)")]
    TooFewPaths { paths: usize, basis: usize },

    #[error("non-finite value from {what} at step {step}")]
    NonFinite { what: String, step: usize },

    #[error("branch probabilities sum to {sum}, expected 1")]
    BadProbabilities { sum: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("root bracket failure: {0}")]
    Bracket(String),

    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("fixed point did not converge after {sweeps} sweeps; sup-norm history {history:?}")]
    FixedPoint { sweeps: usize, history: Vec<f64> },

    #[error("inadmissible control: {0}")]
    Inadmissible(String),
}

impl Error {
    /// True for failures of a computation on valid input, false for bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::IllConditioned { .. }
                | Error::SingularRegression { .. }
                | Error::NonFinite { .. }
                | Error::Bracket(_)
                | Error::NoConvergence { .. }
                | Error::FixedPoint { .. }
        )
    }
}
