pub mod error;
pub mod infer;
pub mod kernels;
pub mod linalg;
#[cfg(any(test, feature = "oracle"))]
pub mod oracle;
pub mod physics;
pub mod quadrature;
pub mod ssm;
pub mod stprior;

pub use error::{Error, Result};
