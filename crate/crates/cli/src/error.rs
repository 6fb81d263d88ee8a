use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] physs_core::Error),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("data cannot be arranged on a grid: {0}")]
    NonGriddableData(String),
    #[error("prediction with zero variance misses its target at index {0}")]
    ZeroVariancePrediction(usize),
    #[error("grid node {0:?} is at the dipole singularity")]
    SingularPoint(Vec<f64>),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    message: String,
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, err: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            message: err.to_string(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(_) => "core",
            CliError::Io { .. } => "io",
            CliError::MalformedRow { .. } => "malformed_row",
            CliError::NonGriddableData(_) => "non_griddable_data",
            CliError::ZeroVariancePrediction(_) => "zero_variance_prediction",
            CliError::SingularPoint(_) => "singular_point",
            CliError::Config(_) => "config",
        }
    }

    /// Machine-readable form printed by the binary on failure.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&ErrorBody {
            error: self.kind(),
            message: self.to_string(),
        })
        .unwrap_or_else(|_| "{\"error\":\"unknown\"}".into())
    }
}
