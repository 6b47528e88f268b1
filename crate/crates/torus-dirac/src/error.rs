//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A metric table produced a non-positive spatial determinant.
    #[error("non-positive spatial metric determinant at t={t}, x={x:?}")]
    NonPositiveDeterminant { t: f64, x: [f64; 3] },
    /// The adaptive integrator underflowed its step or hit its step budget.
    #[error("ODE step failure: {0}")]
    StepFailure(String),
    /// Newton shooting for the world function failed to converge.
    #[error("world-function shooting did not converge (residual {residual:.3e})")]
    NoConvergence { residual: f64 },
    /// A flow was requested beyond the configured integration horizon.
    #[error("flow escape: |t - s| = {span} exceeds horizon {horizon}")]
    FlowEscape { span: f64, horizon: f64 },
    /// The mixed Hessian of the phase degenerated inside the flow neighbourhood,
    /// which signals a phase-construction bug.
    #[error("degenerate mixed phase Hessian (|det| = {0:.3e})")]
    DegenerateMixedHessian(f64),
    /// Riesz exactification found an eigenvalue inside the ambiguous cluster band.
    #[error("eigenvalue cluster ambiguity: eigenvalue {value:.6} lies in [{lo}, {hi}]")]
    ClusterAmbiguity { value: f64, lo: f64, hi: f64 },
    /// A spatial grid is too coarse for the spectral operators.
    #[error("grid too coarse: N = {0} < 8")]
    GridTooCoarse(usize),
    /// The requested operation is not available for this metric preset.
    #[error("wrong preset: {0}")]
    WrongPreset(String),
    /// The covector-space quadrature tail is too large relative to the result.
    #[error("quadrature under-resolved: tail estimate {tail:.3e} exceeds {limit:.1e} of norm {norm:.3e}")]
    QuadratureUnderResolved { tail: f64, norm: f64, limit: f64 },
    /// A doubled-space covariance violated one of the state conditions.
    #[error("state condition violated: {condition} residual {residual:.3e}")]
    ArakiViolation { condition: &'static str, residual: f64 },
    /// Invalid configuration or CLI input.
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
