use thiserror::Error;

/// One violated density-matrix invariant with its measured magnitude.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub enum Violation {
    NonHermitian { deviation: f64 },
    TraceDeviation { deviation: f64 },
    NegativeEigenvalue { eigenvalue: f64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::NonHermitian { deviation } => write!(f, "non-Hermitian (max |A - A^H| = {deviation:.3e})"),
            Violation::TraceDeviation { deviation } => write!(f, "trace deviation {deviation:.3e}"),
            Violation::NegativeEigenvalue { eigenvalue } => write!(f, "negative eigenvalue {eigenvalue:.3e}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid density matrix: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidDensity(Vec<Violation>),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("path budget exceeded: 2^{steps} paths requested, limit 2^{limit}")]
    BudgetExceeded { steps: usize, limit: usize },
    #[error("degenerate measurement direction: {0}")]
    DegenerateDirection(String),
    #[error("drawn branch has vanishing probability {0:.3e}")]
    ZeroProbabilityBranch(f64),
    #[error("quadrature normalization drifted by {0:.3e}")]
    QuadratureDrift(f64),
    #[error("normalization matrix is numerically singular (min eigenvalue {0:.3e})")]
    SingularNormalization(f64),
    #[error("pre-projection trace deviates by {0:.3e}; time step too large")]
    ProjectionOverflow(f64),
    #[error("metric is not symmetric positive definite")]
    NonSpdMetric,
    #[error("time step {dt:.3e} exceeds explicit stability bound {bound:.3e}")]
    CflViolation { dt: f64, bound: f64 },
    #[error("window violation: need k*pi <= theta_minus < theta <= theta_plus < (k+1)*pi, got ({0}, {1}, {2})")]
    WindowViolation(f64, f64, f64),
    #[error("quadrature did not converge (error estimate {0:.3e})")]
    QuadratureNonConvergence(f64),
    #[error("only {0} jumps recorded, at least 100 required")]
    InsufficientJumps(usize),
    #[error("cannot track the root branch continuous from zero at k = {0}")]
    RootTrackingAmbiguity(f64),
    #[error("noise-coefficient fit is ill conditioned (defect norm {0:.3e})")]
    IllConditionedFit(f64),
    #[error("horizon {t} is below the diffusive window {min}")]
    InsufficientTime { t: f64, min: f64 },
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
