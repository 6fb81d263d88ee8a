//! Synthetic datasets and the bundled Allen–Cahn reference solution.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use physs_core::stprior::GridData;

use crate::data::{parse_csv, Schema};
use crate::error::{CliError, Result};

/// Evenly spaced values including both ends.
pub fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..n)
            .map(|i| start + (end - start) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// A training grid and a test grid with its own target definition.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: GridData,
    pub test: GridData,
    pub output_names: Vec<String>,
}

fn series_grid(times: Vec<f64>, values: Vec<f64>) -> Result<GridData> {
    let n = values.len();
    Ok(GridData::new(times, vec![vec![]], values, vec![true; n], 1)?)
}

fn add_noise(values: &mut [f64], variance: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    if variance < 0.0 || !variance.is_finite() {
        return Err(CliError::Config(format!("noise variance {variance}")));
    }
    if variance == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, variance.sqrt()).map_err(|e| CliError::Config(e.to_string()))?;
    for v in values {
        *v += normal.sample(rng);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PendulumParams {
    pub damping: f64,
    pub theta0: f64,
    pub omega0: f64,
    pub train_end: f64,
    pub train_points: usize,
    pub test_end: f64,
    pub test_points: usize,
    pub noise_variance: f64,
    pub step: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            damping: 0.2,
            theta0: 2.0,
            omega0: 0.0,
            train_end: 6.0,
            train_points: 20,
            test_end: 30.0,
            test_points: 200,
            noise_variance: 0.01,
            step: 1e-4,
        }
    }
}

/// Semi-implicit Euler solution of `θ'' + sin θ + b θ' = 0` sampled at
/// sorted `times` by interpolation within a step. Returns `(θ, θ')`.
pub fn pendulum_trajectory(params: &PendulumParams, times: &[f64]) -> Vec<(f64, f64)> {
    let h = params.step;
    let (mut th, mut om) = (params.theta0, params.omega0);
    let mut t = 0.0;
    let mut k = 0usize;
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        loop {
            let t_next = (k + 1) as f64 * h;
            if t_next > target {
                break;
            }
            om += h * (-th.sin() - params.damping * om);
            th += h * om;
            k += 1;
            t = t_next;
        }
        // Interpolate within the partial step.
        let frac = (target - t) / h;
        let acc = -th.sin() - params.damping * om;
        out.push((th + frac * h * om, om + frac * h * acc));
    }
    out
}

/// Noisy training angles on `[0, train_end]`, clean test angles up to `test_end`.
pub fn simulate_pendulum(params: &PendulumParams, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_t = linspace(0.0, params.train_end, params.train_points);
    let test_t = linspace(params.train_end, params.test_end, params.test_points);
    let mut train_y: Vec<f64> = pendulum_trajectory(params, &train_t).iter().map(|p| p.0).collect();
    add_noise(&mut train_y, params.noise_variance, &mut rng)?;
    let test_y = pendulum_trajectory(params, &test_t).iter().map(|p| p.0).collect();
    Ok(Dataset {
        train: series_grid(train_t, train_y)?,
        test: series_grid(test_t, test_y)?,
        output_names: vec!["theta".into()],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DipoleParams {
    pub time_points: usize,
    pub space_points: usize,
    pub test_space_points: usize,
    pub extent: f64,
    pub z: f64,
    pub noise_variance: f64,
}

impl Default for DipoleParams {
    fn default() -> Self {
        DipoleParams {
            time_points: 50,
            space_points: 10,
            test_space_points: 40,
            extent: 2.0,
            z: 1.0,
            noise_variance: 0.0,
        }
    }
}

/// `ψ(r) = m·r / |r|³` for `m = [0, 1, 0]`.
pub fn dipole_potential(r: [f64; 3]) -> f64 {
    let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    r[1] / n.powi(3)
}

/// `H = −∇ψ` restricted to the (time, space) components.
pub fn dipole_field(r: [f64; 3]) -> Result<[f64; 2]> {
    let n2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    if n2.sqrt() < 1e-6 {
        return Err(CliError::SingularPoint(r.to_vec()));
    }
    let n3 = n2 * n2.sqrt();
    let n5 = n3 * n2;
    Ok([3.0 * r[1] * r[0] / n5, -(1.0 / n3 - 3.0 * r[1] * r[1] / n5)])
}

fn dipole_grid(params: &DipoleParams, space: usize) -> Result<GridData> {
    let e = params.extent;
    let times = linspace(-e, e, params.time_points);
    let locs = linspace(-e, e, space);
    let mut values = Vec::with_capacity(times.len() * locs.len() * 2);
    for &t in &times {
        for &s in &locs {
            values.extend(dipole_field([t, s, params.z])?);
        }
    }
    let n = values.len();
    Ok(GridData::new(
        times,
        locs.into_iter().map(|s| vec![s]).collect(),
        values,
        vec![true; n],
        2,
    )?)
}

/// Two-output field of a magnetic dipole on a (time, space) grid at height `z`.
pub fn simulate_dipole(params: &DipoleParams, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = dipole_grid(params, params.space_points)?;
    add_noise(&mut train.values, params.noise_variance, &mut rng)?;
    let test = dipole_grid(params, params.test_space_points)?;
    Ok(Dataset {
        train,
        test,
        output_names: vec!["h_t".into(), "h_s".into()],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AllenCahnParams {
    pub train_points: usize,
    pub train_end: f64,
}

impl Default for AllenCahnParams {
    fn default() -> Self {
        AllenCahnParams {
            train_points: 256,
            train_end: 0.28,
        }
    }
}

const ALLEN_CAHN_CSV: &str = include_str!("../fixtures/allen_cahn.csv");

/// Bundled reference solution on a 100 × 256 grid over `[0, 1] × [−1, 1)`.
pub fn allen_cahn_reference() -> Result<GridData> {
    parse_csv(ALLEN_CAHN_CSV, Schema { spatial_dims: 1 })
}

/// Random training cells from the early part of the reference solution;
/// the test set is the full grid.
pub fn simulate_allen_cahn(params: &AllenCahnParams, seed: u64) -> Result<Dataset> {
    let full = allen_cahn_reference()?;
    let ns = full.locations.len();
    let early: Vec<usize> = full
        .times
        .iter()
        .enumerate()
        .filter(|(_, t)| **t <= params.train_end)
        .flat_map(|(ti, _)| (0..ns).map(move |si| ti * ns + si))
        .collect();
    if params.train_points > early.len() {
        return Err(CliError::Config(format!(
            "{} training points requested from {} cells",
            params.train_points,
            early.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; full.mask.len()];
    for i in sample(&mut rng, early.len(), params.train_points).iter() {
        mask[early[i]] = true;
    }
    let train = GridData::new(
        full.times.clone(),
        full.locations.clone(),
        full.values.clone(),
        mask,
        1,
    )?;
    Ok(Dataset {
        train,
        test: full,
        output_names: vec!["u".into()],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentForceParams {
    pub theta0: f64,
    pub end: f64,
    pub train_points: usize,
    pub test_points: usize,
    pub noise_variance: f64,
}

impl Default for LatentForceParams {
    fn default() -> Self {
        LatentForceParams {
            theta0: 2.0,
            end: 30.0,
            train_points: 300,
            test_points: 1000,
            noise_variance: 1e-4,
        }
    }
}

/// Undamped pendulum angles for training; the test target is `sin θ(t)`.
pub fn simulate_latent_force(params: &LatentForceParams, seed: u64) -> Result<Dataset> {
    let pend = PendulumParams {
        damping: 0.0,
        theta0: params.theta0,
        omega0: 0.0,
        step: 1e-4,
        ..PendulumParams::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_t = linspace(0.0, params.end, params.train_points);
    let mut train_y: Vec<f64> = pendulum_trajectory(&pend, &train_t).iter().map(|p| p.0).collect();
    add_noise(&mut train_y, params.noise_variance, &mut rng)?;
    // Test times interleave the training grid.
    let test_t: Vec<f64> = (0..params.test_points)
        .map(|i| params.end * (i as f64 + 0.5) / params.test_points as f64)
        .collect();
    let test_y = pendulum_trajectory(&pend, &test_t).iter().map(|p| p.0.sin()).collect();
    Ok(Dataset {
        train: series_grid(train_t, train_y)?,
        test: series_grid(test_t, test_y)?,
        output_names: vec!["theta".into()],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonotonicParams {
    pub end: f64,
    pub train_points: usize,
    pub test_points: usize,
    pub noise_variance: f64,
}

impl Default for MonotonicParams {
    fn default() -> Self {
        MonotonicParams {
            end: 10.0,
            train_points: 100,
            test_points: 200,
            noise_variance: 0.04,
        }
    }
}

/// Increasing test function with slope at least 0.1.
pub fn monotonic_truth(t: f64) -> f64 {
    0.1 * t + 0.5 * (t - 5.0).tanh()
}

pub fn simulate_monotonic(params: &MonotonicParams, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_t = linspace(0.0, params.end, params.train_points);
    let mut train_y: Vec<f64> = train_t.iter().map(|t| monotonic_truth(*t)).collect();
    add_noise(&mut train_y, params.noise_variance, &mut rng)?;
    let test_t = linspace(0.0, params.end, params.test_points);
    let test_y = test_t.iter().map(|t| monotonic_truth(*t)).collect();
    Ok(Dataset {
        train: series_grid(train_t, train_y)?,
        test: series_grid(test_t, test_y)?,
        output_names: vec!["y".into()],
    })
}
