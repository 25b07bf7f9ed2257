use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("eigendecomposition did not converge after {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    NoConvergence { sweeps: usize, off_norm: f64 },

    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("matrix is not symmetric: entry ({i},{j}) differs from ({j},{i}) by {gap:e}")]
    NotSymmetric { i: usize, j: usize, gap: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid value for `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("no Fejer rank up to {n_max} reaches tolerance {eps:e} (deviation at n_max is {deviation:e})")]
    RankNotFound { eps: f64, n_max: usize, deviation: f64 },

    #[error("infeasible perturbation request: {0}")]
    InfeasibleRequest(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("perturbation construction failed at c = {c:e} after {halvings} halvings; failing check: {check}")]
    ConstructionFailed { c: f64, halvings: usize, check: String },

    #[error("coefficient scheme infeasible: {detail}; {hint}")]
    SchemeInfeasible { needed_terms: f64, detail: String, hint: String },

    #[error("lattice enumeration infeasible: {count:e} candidates exceeds cap {cap}")]
    EnumerationInfeasible { count: f64, cap: usize },

    #[error("basis does not contain the rounded matrix H of the requested target")]
    BasisIncomplete,

    #[error("internal consistency failure: {0}")]
    InternalConsistency(String),

    #[error("circulant embedding failed: clipped negative mass {clipped:e} exceeds {allowed:e} at embedding size {size}")]
    Embedding { clipped: f64, allowed: f64, size: usize },

    #[error("degenerate window: {0}")]
    DegenerateWindow(String),

    #[error("autocovariance table too short: need lag {needed}, have {available}")]
    TableTooShort { needed: usize, available: usize },

    #[error("missing building-block stream {0}")]
    MissingBlock(String),

    #[error("level {level}: {source}")]
    Level {
        level: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_level(self, level: usize) -> Self {
        Error::Level { level, source: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
