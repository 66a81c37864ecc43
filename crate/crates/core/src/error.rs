use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite entry in {what}")]
    NonFinite { what: &'static str },

    #[error("power iteration did not converge after {iterations} iterations (estimate {estimate}, residual {residual})")]
    NoConvergence {
        iterations: usize,
        estimate: f64,
        residual: f64,
    },

    #[error("matrix is not symmetric: max asymmetry {max_asymmetry}")]
    Asymmetric { max_asymmetry: f64 },

    #[error("matrix is not positive semidefinite: {detail}")]
    NotPsd { detail: String },

    #[error("Jacobi sweeps exhausted with off-diagonal mass {off_diagonal}")]
    EigenNoConvergence { off_diagonal: f64 },

    #[error("degenerate activation: E[sigma^2] = {second_moment}")]
    DegenerateActivation { second_moment: f64 },

    #[error("non-finite activation at layer {layer}")]
    NonFiniteLayer { layer: usize },

    #[error("layer index {layer} out of range 1..={max}")]
    LayerOutOfRange { layer: usize, max: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("correlation {rho} outside [-1, 1]")]
    InvalidCorrelation { rho: f64 },

    #[error("quadrature failed at layer {layer}, entry ({i}, {j}): {detail}")]
    Quadrature {
        layer: usize,
        i: usize,
        j: usize,
        detail: String,
    },

    #[error("lambda_0 = {0} is not positive")]
    NonPositiveLambda0(f64),

    #[error("finite-difference step must be positive, got {0}")]
    NonPositiveStep(f64),
}
