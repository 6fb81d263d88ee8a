//! Predictive metrics for Gaussian marginals.

use physs_core::physics::{normal_cdf, normal_pdf};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub nlpd: f64,
    pub crps: f64,
    pub r_squared: f64,
    pub wall_seconds: f64,
    pub epochs: usize,
}

/// Scores Gaussian predictions `N(mean, std²)` against `truth`.
pub fn metrics(mean: &[f64], std: &[f64], truth: &[f64]) -> Result<MetricsReport> {
    if mean.len() != truth.len() || std.len() != truth.len() {
        return Err(CliError::Core(physs_core::Error::ShapeMismatch(format!(
            "{} means, {} deviations, {} targets",
            mean.len(),
            std.len(),
            truth.len()
        ))));
    }
    if truth.is_empty() {
        return Err(CliError::Config("no test targets to score".into()));
    }
    let n = truth.len() as f64;
    let mut sse = 0.0;
    let mut nlpd = 0.0;
    let mut crps = 0.0;
    for i in 0..truth.len() {
        let e = truth[i] - mean[i];
        sse += e * e;
        let s = std[i];
        if s <= 0.0 {
            if e != 0.0 {
                return Err(CliError::ZeroVariancePrediction(i));
            }
            // A point mass on the target: infinite density, zero CRPS.
            nlpd += f64::NEG_INFINITY;
            continue;
        }
        let z = e / s;
        nlpd += 0.5 * LN_2PI + s.ln() + 0.5 * z * z;
        crps += s * (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * normal_pdf(z) - 1.0 / std::f64::consts::PI.sqrt());
    }
    let mean_truth = truth.iter().sum::<f64>() / n;
    let sst: f64 = truth.iter().map(|y| (y - mean_truth).powi(2)).sum();
    Ok(MetricsReport {
        rmse: (sse / n).sqrt(),
        nlpd: nlpd / n,
        crps: crps / n,
        r_squared: if sst > 0.0 { 1.0 - sse / sst } else { f64::NAN },
        wall_seconds: 0.0,
        epochs: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let y = [1.0, 2.0, 4.0];
        let m = metrics(&y, &[0.0; 3], &y).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.r_squared, 1.0);
        assert_eq!(m.crps, 0.0);
    }

    #[test]
    fn unit_gaussian_scores() {
        let m = metrics(&[0.5], &[1.0], &[0.5]).unwrap();
        let crps = 2.0 / (2.0 * std::f64::consts::PI).sqrt() - 1.0 / std::f64::consts::PI.sqrt();
        assert!((m.crps - crps).abs() < 1e-12);
        assert!((m.crps - 0.2337).abs() < 1e-4);
        assert!((m.nlpd - 0.9189385332046727).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_miss() {
        assert!(matches!(
            metrics(&[0.0], &[0.0], &[1.0]),
            Err(CliError::ZeroVariancePrediction(0))
        ));
    }
}
