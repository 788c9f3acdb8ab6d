use thiserror::Error;

pub type Result<T, E = HeatError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HeatError {
    #[error("point {point:?} lies outside the chart domain")]
    OutOfChart { point: Vec<f64> },

    #[error("metric is singular or ill-conditioned at {point:?} (condition number {condition:e})")]
    SingularMetric { point: Vec<f64>, condition: f64 },

    #[error("trajectory left the chart domain near {point:?}")]
    LeftChart { point: Vec<f64> },

    #[error("geodesic shooting did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("Van Vleck determinant is not positive ({value:e}); the pair is outside a normal neighbourhood")]
    NegativeDeterminant { value: f64 },

    #[error("coefficient recursion needs about {estimated} two-point evaluations, budget is {budget}")]
    CostBudgetExceeded { estimated: u64, budget: u64 },

    #[error("series truncated too early: tail {tail:e} against value norm {norm:e}")]
    TruncationWarning { tail: f64, norm: f64 },

    #[error("operation needs an even dimension, got d = {dim}")]
    OddDimension { dim: usize },

    #[error("potential {value} exceeds the declared supremum {bound} at {point:?}")]
    SupremumViolated { value: f64, bound: f64, point: Vec<f64> },

    #[error("adaptive quadrature failed on [{lower}, {upper}] (error estimate {estimate:e})")]
    QuadratureFailure { lower: f64, upper: f64, estimate: f64 },

    #[error("ODE integration did not reach tolerance (error estimate {estimate:e} with {steps} steps)")]
    OdeTolerance { estimate: f64, steps: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl HeatError {
    /// True for failures that come from the numerics rather than the input.
    pub fn is_numerical(&self) -> bool {
        !matches!(
            self,
            HeatError::InvalidProblem(_)
                | HeatError::InvalidArgument(_)
                | HeatError::DimensionMismatch { .. }
        )
    }
}
