use thiserror::Error;

/// Errors raised anywhere in the inference stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid kernel hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("kernel family {family} does not support derivative order {order}")]
    OrderExceedsSmoothness { family: String, order: usize },

    #[error("operation requires a stationary kernel, got {0}")]
    NonStationary(String),

    #[error("kernel family {0} has no state-space representation")]
    Unsupported(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("innovation covariance is not positive definite at step {step}")]
    InnovationNotPsd { step: usize },

    #[error("gram matrix is not positive definite after jitter ({0})")]
    GramNotPsd(String),

    #[error("site precision is not positive semi-definite at time step {step}")]
    SitePrecisionNotPsd { step: usize },

    #[error("duplicate spatial location at index {0}")]
    DuplicateSpatialLocation(usize),

    #[error("derivative orders do not cover first spatial derivatives: {0}")]
    InsufficientDerivativeOrders(String),

    #[error("likelihood evaluated to a non-finite value: {0}")]
    NonFiniteLikelihood(String),

    #[error("quadrature over {dims} dimensions with order {order} is too large")]
    QuadratureOverflow { dims: usize, order: usize },

    #[error("singular gram matrix in dense oracle: {0}")]
    SingularGram(String),

    #[error("dense oracle refuses problems of size {0} (limit 2000)")]
    OracleTooLarge(usize),

    #[error("query at spatial location {0:?} is not a state node")]
    QueryOutsideSpatialModel(Vec<f64>),

    #[error("optimisation diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("invalid model configuration: {0}")]
    InvalidModel(String),
}

pub type Result<T> = std::result::Result<T, Error>;
