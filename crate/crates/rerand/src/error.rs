use thiserror::Error;

/// Errors surfaced by design construction, calibration, and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("covariance matrix is singular")]
    SingularCovariance,

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("tier {tier} is collinear with earlier tiers")]
    CollinearTiers { tier: usize },

    #[error("covariate {column} has zero variance")]
    ZeroVariance { column: usize },

    #[error("stratum {stratum} has fewer than 2 treated or 2 control units")]
    InsufficientStratum { stratum: usize },

    #[error("degrees of freedom must be a positive integer")]
    InvalidDof,

    #[error("probability {value} is outside its valid range")]
    InvalidProbability { value: f64 },

    #[error("threshold {value} is not valid")]
    InvalidThreshold { value: f64 },

    #[error("acceptance too rare: {accepted} of {draws} draws accepted")]
    AcceptanceTooRare { accepted: u64, draws: u64 },

    #[error("invalid randomization plan: {0}")]
    InvalidPlan(String),

    #[error("{count} assignments exceed the enumeration limit of {limit}")]
    TooLarge { count: u128, limit: u64 },

    #[error("tier weights are degenerate")]
    DegenerateWeights,

    #[error("selection is empty")]
    EmptySelection,

    #[error("invalid criterion: {0}")]
    InvalidCriterion(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by unreadable or malformed input rather than
    /// by the mathematics of the request.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::InvalidData(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
