use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("Cholesky factorization failed: matrix is not positive definite ({context})")]
    CholeskyFailure { context: String },

    #[error("first diagonal element of the row covariance is not positive ({value})")]
    DegenerateScale { value: f64 },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("component {g} collapsed: responsibility mass {mass:.6} below the minimum {min:.1}")]
    EmptyCluster { g: usize, mass: f64, min: f64 },

    #[error("singular Gram matrix in the regression coefficient update (component {g})")]
    SingularGram { g: usize },

    #[error("all mixture components underflowed for observation {i}")]
    AllZeroRow { i: usize },

    #[error("log-likelihood decreased by {drop:.3e} at iteration {iter}: implementation bug")]
    NonMonotone { iter: usize, drop: f64 },

    #[error("k-means produced an empty cluster after all restarts")]
    DegenerateClustering,

    #[error("every initialization strategy failed; last error: {0}")]
    AllStrategiesFailed(String),

    #[error("fitted G={fitted} does not match generating G={truth}")]
    GMismatch { fitted: usize, truth: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("ragged block for unit {unit}, role {role}: {msg}")]
    Shape { unit: usize, role: String, msg: String },

    #[error("duplicate cell: unit {unit}, role {role}, row {row}, col {col}")]
    DuplicateCell { unit: usize, role: String, row: usize, col: usize },

    #[error("unsupported model file version: {0}")]
    VersionMismatch(String),

    #[error("invariant violation in loaded model: {0}")]
    InvariantViolation(String),

    #[error("unknown scenario: {0}")]
    UnknownScenario(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
