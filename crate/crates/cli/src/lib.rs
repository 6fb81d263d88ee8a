pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod simulate;

pub use error::{CliError, Result};
