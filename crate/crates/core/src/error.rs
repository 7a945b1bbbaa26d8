use thiserror::Error;

/// Errors raised by the basis construction, the solvers and the fitting loop.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("covariate is constant (standard deviation is zero)")]
    ConstantCovariate,

    #[error("need at least {required} observations, got {found}")]
    TooFewObservations { required: usize, found: usize },

    #[error("knot placement left {found} interior knots; at least 1 is required")]
    TooFewDistinctValues { found: usize },

    #[error("invalid knot set: {0}")]
    InvalidKnots(String),

    #[error("value {value} lies outside the boundary knots [{lower}, {upper}]")]
    OutOfRange { value: f64, lower: f64, upper: f64 },

    #[error("spline design is rank deficient (singular value ratio {ratio:e})")]
    RankDeficient { ratio: f64 },

    #[error("penalty has {found} near-zero eigenvalues, expected 2")]
    PenaltyNullSpace { found: usize },

    #[error("smoothness metric of group {group} is not positive definite")]
    SingularBlock { group: usize },

    #[error("input covariance is not positive semi-definite (min eigenvalue {min_eigenvalue:e})")]
    NonPsdInput { min_eigenvalue: f64 },

    #[error("precision matrix is not positive definite")]
    NonPdPrecision,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("iteration {iteration}, step {step}, response {response:?}: {source}")]
    Step {
        iteration: usize,
        step: &'static str,
        response: Option<usize>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::RankDeficient { .. }
            | Error::PenaltyNullSpace { .. }
            | Error::SingularBlock { .. }
            | Error::NonPsdInput { .. }
            | Error::NonPdPrecision => true,
            Error::Step { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn at(self, iteration: usize, step: &'static str, response: Option<usize>) -> Self {
        Error::Step {
            iteration,
            step,
            response,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
