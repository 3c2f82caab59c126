use thiserror::Error;

/// Failures raised by the geometric kernels.
///
/// Grid locations are reported as multi-indices so that a failing point can be
/// looked up directly in exported tables.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("axis {axis} out of range for a {dim}-dimensional chart")]
    AxisOutOfRange { axis: usize, dim: usize },

    #[error("axis {axis} has {points} points; at least {min} are required")]
    TooFewPoints { axis: usize, points: usize, min: usize },

    #[error("invalid chart: {0}")]
    InvalidChart(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("lattice path leaves the chart at step {step}")]
    PathLeavesChart { step: usize },

    #[error("metric is singular at grid point {point:?}")]
    SingularMetric { point: Vec<usize> },

    #[error("matrix is not positive definite at grid point {point:?} (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { point: Vec<usize>, min_eigenvalue: f64 },

    #[error("gradient map is not injective on the chart: {0}")]
    NotInjective(String),

    #[error("frame is singular or ill-conditioned at grid point {point:?} (condition {condition:e})")]
    SingularFrame { point: Vec<usize>, condition: f64 },

    #[error("integrability residual {residual:e} exceeds tolerance {tolerance:e}")]
    IntegrabilityExceeded { residual: f64, tolerance: f64 },

    #[error("one-form is not closed: residual {residual:e} exceeds tolerance {tolerance:e}")]
    NotClosed { residual: f64, tolerance: f64 },

    #[error("Lauritzen verification failed: metric residual {metric:e}, connection residual {connection:e}, tolerance {tolerance:e}")]
    VerificationFailed { metric: f64, connection: f64, tolerance: f64 },

    #[error("no admissible convexification constant up to C = {cap:e}; shrink the tube")]
    ConvexificationCapReached { cap: f64 },

    #[error("tube grid needs {entries} Hessian entries, over the limit of {limit}; lower the resolution or the codimension")]
    TubeTooLarge { entries: usize, limit: usize },

    #[error("tube embedding is not injective: {0}")]
    TubeNotInjective(String),

    #[error("frame is not transverse at grid point {point:?}: {reason}")]
    NotTransverse { point: Vec<usize>, reason: String },

    #[error("equiaffine condition violated: max |tau| = {max_tau:e} exceeds tolerance {tolerance:e}")]
    NotEquiaffine { max_tau: f64, tolerance: f64 },

    #[error("affine second fundamental form is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    IndefiniteAffineMetric { min_eigenvalue: f64 },

    #[error("immersion rank deficient at grid point {point:?} (singular value ratio {ratio:e})")]
    RankDeficient { point: Vec<usize>, ratio: f64 },

    #[error("unknown fixture `{0}`")]
    UnknownFixture(String),

    #[error("fixture `{fixture}` does not provide {what}")]
    FixtureLacks { fixture: String, what: &'static str },
}

pub type Result<T, E = GeometryError> = std::result::Result<T, E>;
