//! Turns a configuration into a model, trains it, scores it and writes artifacts.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use physs_core::infer::{
    fit_from, predict, time_union, FitConfig, FitOutput, ModelSpec, NatgradSchedule, NoiseFloors, PredictOptions,
    Problem, Query, TraceRow, VariationalState,
};
use physs_core::physics::{catalog_entry, preset_weights, GenerativeSpec, NoiseConfig, Term, DEFAULT_PROBIT_SCALE};
use physs_core::stprior::{DerivativeOrders, GridData, LatentPrior, SpatialKernel};
use physs_core::Error;

use crate::config::{BoundaryKind, ExperimentConfig, Range1};
use crate::data::{fmt_f64, load_csv, save_csv, Schema};
use crate::error::{CliError, Result};
use crate::metrics::{metrics, MetricsReport};
use crate::simulate::{
    linspace, simulate_allen_cahn, simulate_dipole, simulate_latent_force, simulate_monotonic, simulate_pendulum,
    AllenCahnParams, Dataset, DipoleParams, LatentForceParams, MonotonicParams, PendulumParams,
};

/// Simulator names accepted by `data.simulator` and `simulate`.
pub const SIMULATORS: [&str; 5] = ["pendulum", "dipole", "allen_cahn", "latent_force", "monotonic"];

fn decode<T: serde::de::DeserializeOwned + Default>(params: &Option<toml::Table>) -> Result<T> {
    match params {
        None => Ok(T::default()),
        Some(t) => t
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("simulator params: {e}"))),
    }
}

/// Runs a named simulator with parameters from a TOML table.
pub fn simulate(name: &str, params: &Option<toml::Table>, seed: u64) -> Result<Dataset> {
    match name {
        "pendulum" => simulate_pendulum(&decode::<PendulumParams>(params)?, seed),
        "dipole" => simulate_dipole(&decode::<DipoleParams>(params)?, seed),
        "allen_cahn" => simulate_allen_cahn(&decode::<AllenCahnParams>(params)?, seed),
        "latent_force" => simulate_latent_force(&decode::<LatentForceParams>(params)?, seed),
        "monotonic" => simulate_monotonic(&decode::<MonotonicParams>(params)?, seed),
        other => Err(CliError::Config(format!("unknown simulator '{other}'; expected one of {SIMULATORS:?}"))),
    }
}

pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    if let Some(sim) = &config.data.simulator {
        return simulate(sim, &config.data.params, config.data.seed);
    }
    let csv = config.data.csv.as_ref().ok_or_else(|| CliError::Config("no data source".into()))?;
    let schema = Schema {
        spatial_dims: csv.spatial_dims,
    };
    let train = load_csv(&csv.train, schema)?;
    let test = load_csv(&csv.test, schema)?;
    let output_names = (0..train.outputs).map(|p| format!("y{}", p + 1)).collect();
    Ok(Dataset {
        train,
        test,
        output_names,
    })
}

/// Moves `t` onto a data time that differs only by rounding, so the two do not
/// become separate, nearly coincident filter steps.
fn snap(t: f64, known: &[f64]) -> f64 {
    let tol = 1e-9 * t.abs().max(1.0);
    known
        .iter()
        .copied()
        .filter(|k| (k - t).abs() <= tol)
        .min_by(|a, b| (a - t).abs().total_cmp(&(b - t).abs()))
        .unwrap_or(t)
}

fn product_grid(axes: &[Range1]) -> Vec<Vec<f64>> {
    let mut points: Vec<Vec<f64>> = vec![vec![]];
    for &(a, b, n) in axes {
        let vals = linspace(a, b, n);
        points = points
            .iter()
            .flat_map(|p| {
                vals.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect();
    }
    points
}

/// A configured model bound to its data.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    pub problem: Problem,
    /// Mixed-output component for each test output.
    pub test_components: Vec<usize>,
    /// Test cells `(time index, location index)` with at least one target.
    pub test_cells: Vec<(usize, usize)>,
}

impl Experiment {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let dataset = load_dataset(config)?;
        Self::from_dataset(config, dataset)
    }

    pub fn from_dataset(config: &ExperimentConfig, dataset: Dataset) -> Result<Self> {
        let m = &config.model;
        let orders = DerivativeOrders::new(m.d_t, m.d_s)?;
        let entry = m.residual.as_deref().map(|r| catalog_entry(r, orders)).transpose()?;
        let latents: Vec<LatentPrior> = m
            .latents
            .iter()
            .map(|l| -> Result<LatentPrior> {
                Ok(LatentPrior {
                    temporal: l.temporal.to_spec()?,
                    spatial: SpatialKernel::new(l.spatial.iter().map(|s| s.to_spec()).collect::<Result<_>>()?),
                })
            })
            .collect::<Result<_>>()?;
        if let Some(e) = &entry {
            if e.latents != latents.len() {
                return Err(CliError::Config(format!(
                    "residual '{}' needs {} latents, {} configured",
                    e.name,
                    e.latents,
                    latents.len()
                )));
            }
        }
        let noise = NoiseConfig {
            observation: m.noise.observation.clone(),
            collocation: m.noise.collocation,
            boundary: m.noise.boundary,
        };
        let obs_outputs = config
            .data
            .observed_components
            .clone()
            .unwrap_or_else(|| (0..dataset.train.outputs).collect());
        let mut gen = GenerativeSpec::identity(latents.len(), orders, obs_outputs.clone(), noise);
        if let Some(e) = &entry {
            if let Some(preset) = e.mixing {
                gen.mixing = preset_weights(preset, orders)?;
            }
            gen.residual = e.residual.clone();
            gen.residual_inputs = e.residual_inputs.clone();
            if e.monotonic {
                gen.probit_input = Some(orders.d_s);
                gen.probit_scale = m.probit_scale.unwrap_or(DEFAULT_PROBIT_SCALE);
            }
        }
        gen.validate()?;

        let mut terms: Vec<Term> = gen.observation_terms(&dataset.train)?;
        if let Some(c) = &config.data.collocation {
            let known = time_union(&dataset.train.times, &dataset.test.times);
            let times: Vec<f64> = linspace(c.time.0, c.time.1, c.time.2)
                .into_iter()
                .map(|t| snap(t, &known))
                .collect();
            let points = product_grid(&c.space);
            if gen.residual.is_some() {
                terms.extend(gen.collocation_terms(&times, &points)?);
            }
            if gen.probit_input.is_some() {
                terms.extend(gen.monotonic_terms(&times, &points)?);
            }
            if let Some(BoundaryKind::Periodic) = config.data.boundary {
                let (lo, hi) = c
                    .space
                    .first()
                    .map(|r| (r.0, r.1))
                    .ok_or_else(|| CliError::Config("periodic boundary needs a spatial range".into()))?;
                let w = gen.out_dim();
                let deriv = if m.d_s >= 2 { Some(1) } else { None };
                for &t in &times {
                    terms.push(gen.boundary_term(t, &[(vec![lo], 0, 1.0), (vec![hi], 0, -1.0)], 0.0)?);
                    if let Some(c1) = deriv.filter(|c| *c < w) {
                        terms.push(gen.boundary_term(t, &[(vec![lo], c1, 1.0), (vec![hi], c1, -1.0)], 0.0)?);
                    }
                }
            }
        } else if config.data.boundary.is_some() {
            return Err(CliError::Config("boundary conditions need a collocation grid".into()));
        }

        let mut spec = ModelSpec::new(latents, gen, m.mode.into());
        spec.nodes = m.inducing.as_ref().map(|axes| product_grid(axes));
        spec.iwp_initial_variance = m.iwp_initial_variance;
        spec.jitter = m.jitter;
        spec.mean_field = m.mean_field;
        spec.curvature = m.curvature.into();
        spec.quadrature_order = m.quadrature_order;
        spec.floors = NoiseFloors::default();
        let problem = Problem::new(spec, terms, &dataset.test.times)?;

        let test_components = config.data.test_components.clone().unwrap_or(obs_outputs);
        if test_components.len() != dataset.test.outputs {
            return Err(CliError::Config(format!(
                "{} test components for {} test outputs",
                test_components.len(),
                dataset.test.outputs
            )));
        }
        let mut test_cells = Vec::new();
        for ti in 0..dataset.test.times.len() {
            for si in 0..dataset.test.locations.len() {
                if (0..dataset.test.outputs).any(|p| dataset.test.value(ti, si, p).is_some()) {
                    test_cells.push((ti, si));
                }
            }
        }
        Ok(Experiment {
            config: config.clone(),
            dataset,
            problem,
            test_components,
            test_cells,
        })
    }

    pub fn fit_config(&self) -> FitConfig {
        let t = &self.config.train;
        FitConfig {
            epochs: t.epochs,
            adam_lr: t.adam_lr,
            inner_steps: t.inner_steps,
            schedule: NatgradSchedule {
                warmup_epochs: t.natgrad.warmup_epochs,
                warmup_beta: t.natgrad.warmup_lr,
                beta: t.natgrad.lr,
            },
            noise_freeze_fraction: t.noise_freeze_fraction,
            fd_step: t.fd_step,
            batch: t.batch,
            seed: t.seed,
            threads: thread_budget(),
            fixed: t.fixed.clone(),
            eval_every: t.eval_every,
        }
    }

    /// Predictive mean and standard deviation for every test cell and output.
    pub fn predict_test(&self, state: &VariationalState) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let test = &self.dataset.test;
        let queries: Vec<Query> = self
            .test_cells
            .iter()
            .map(|&(ti, si)| Query::at(test.times[ti], test.locations[si].clone()))
            .collect();
        let preds = predict(&self.problem, state, &queries, &self.test_components, PredictOptions::default())?;
        Ok(preds
            .into_iter()
            .map(|p| {
                let std = (0..p.mean.len()).map(|i| p.variance(i).max(0.0).sqrt()).collect();
                (p.mean.iter().cloned().collect(), std)
            })
            .collect())
    }

    /// Scores predictions on the first test output.
    pub fn score(&self, preds: &[(Vec<f64>, Vec<f64>)]) -> Result<MetricsReport> {
        self.score_output(preds, 0)
    }

    pub fn score_output(&self, preds: &[(Vec<f64>, Vec<f64>)], p: usize) -> Result<MetricsReport> {
        let test = &self.dataset.test;
        let mut mean = Vec::new();
        let mut std = Vec::new();
        let mut truth = Vec::new();
        for (&(ti, si), (m, s)) in self.test_cells.iter().zip(preds) {
            if let Some(y) = test.value(ti, si, p) {
                mean.push(m[p]);
                std.push(s[p]);
                truth.push(y);
            }
        }
        metrics(&mean, &std, &truth)
    }

    pub fn initial_state(&self) -> Result<VariationalState> {
        Ok(self.problem.initial_state(self.config.train.seed)?)
    }

    /// Trains from `state` (or a fresh state), tracking test metrics.
    pub fn train(&self, state: Option<VariationalState>) -> Result<FitOutput> {
        let state = match state {
            Some(s) => s,
            None => self.initial_state()?,
        };
        let mut monitor = |_: &Problem, s: &VariationalState| -> Option<(f64, f64)> {
            let preds = self.predict_test(s).ok()?;
            let m = self.score(&preds).ok()?;
            Some((m.rmse, m.nlpd))
        };
        Ok(fit_from(&self.problem, state, &self.fit_config(), Some(&mut monitor))?)
    }
}

/// Worker threads: `PHYSS_THREADS` if set, otherwise available parallelism.
pub fn thread_budget() -> usize {
    std::env::var("PHYSS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Everything needed to reproduce predictions without retraining.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedRun {
    pub config: ExperimentConfig,
    pub state: VariationalState,
}

/// Outcome of [`run`].
pub struct RunOutput {
    pub metrics: MetricsReport,
    pub fit: FitOutput,
    pub predictions: Vec<(Vec<f64>, Vec<f64>)>,
    pub experiment: Experiment,
}

/// Builds, trains, predicts and scores; writes artifacts when an output
/// directory is configured or given.
pub fn run(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunOutput> {
    let start = Instant::now();
    let experiment = Experiment::build(config)?;
    let fit = experiment.train(None)?;
    if let Some(err) = &fit.diverged {
        if fit.trace.is_empty() {
            return Err(CliError::Core(err.clone()));
        }
    }
    let predictions = experiment.predict_test(&fit.state)?;
    let mut report = experiment.score(&predictions)?;
    report.wall_seconds = start.elapsed().as_secs_f64();
    report.epochs = fit.state.epoch;
    let dir: Option<PathBuf> = out_dir
        .map(Path::to_path_buf)
        .or_else(|| config.output.directory.as_ref().map(PathBuf::from));
    if let Some(dir) = dir {
        write_artifacts(&dir, &experiment, &fit, &predictions, &report)?;
    }
    if let Some(err) = &fit.diverged {
        return Err(CliError::Core(err.clone()));
    }
    Ok(RunOutput {
        metrics: report,
        fit,
        predictions,
        experiment,
    })
}

fn write(path: &Path, text: String) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn predictions_csv(experiment: &Experiment, preds: &[(Vec<f64>, Vec<f64>)]) -> String {
    let test = &experiment.dataset.test;
    let dims = test.locations.first().map(|l| l.len()).unwrap_or(0);
    let mut out = String::from("t");
    for d in 0..dims {
        out.push_str(&format!(",s{}", d + 1));
    }
    for p in 0..test.outputs {
        let name = experiment
            .dataset
            .output_names
            .get(p)
            .cloned()
            .unwrap_or_else(|| format!("y{}", p + 1));
        out.push_str(&format!(",{name}_mean,{name}_std"));
    }
    out.push('\n');
    for (&(ti, si), (m, s)) in experiment.test_cells.iter().zip(preds) {
        out.push_str(&fmt_f64(test.times[ti]));
        for v in &test.locations[si] {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        for p in 0..m.len() {
            out.push(',');
            out.push_str(&fmt_f64(m[p]));
            out.push(',');
            out.push_str(&fmt_f64(s[p]));
        }
        out.push('\n');
    }
    out
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("epoch,elbo,ell,rmse,nlpd,seconds\n");
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            fmt_f64(r.elbo),
            fmt_f64(r.ell),
            fmt_f64(r.rmse),
            fmt_f64(r.nlpd),
            fmt_f64(r.seconds)
        ));
    }
    out
}

pub fn write_artifacts(
    dir: &Path,
    experiment: &Experiment,
    fit: &FitOutput,
    preds: &[(Vec<f64>, Vec<f64>)],
    report: &MetricsReport,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let json = serde_json::to_string_pretty(report).map_err(|e| CliError::Config(e.to_string()))?;
    write(&dir.join("metrics.json"), json)?;
    write(&dir.join("predictions.csv"), predictions_csv(experiment, preds))?;
    write(&dir.join("trace.csv"), trace_csv(&fit.trace))?;
    let saved = SavedRun {
        config: experiment.config.clone(),
        state: fit.state.clone(),
    };
    let json = serde_json::to_string(&saved).map_err(|e| CliError::Config(e.to_string()))?;
    write(&dir.join("state.json"), json)
}

/// Writes a simulator's train and test grids as CSV.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    save_csv(&dataset.train, &dataset.output_names, dir.join("train.csv"))?;
    save_csv(&dataset.test, &dataset.output_names, dir.join("test.csv"))
}

/// Predicts every cell of `grid` (only its coordinates are used) from a saved run.
pub fn predict_grid(saved: &SavedRun, grid: &GridData) -> Result<(Experiment, Vec<(Vec<f64>, Vec<f64>)>)> {
    let mut experiment = Experiment::build(&saved.config)?;
    if saved.state.mode != experiment.problem.spec.mode {
        return Err(CliError::Core(Error::InvalidModel("saved state was trained in another mode".into())));
    }
    let outputs = experiment.test_components.len();
    let n = grid.times.len() * grid.locations.len() * outputs;
    experiment.dataset.test = GridData::new(grid.times.clone(), grid.locations.clone(), vec![0.0; n], vec![true; n], outputs)?;
    experiment.test_cells = (0..grid.times.len())
        .flat_map(|ti| (0..grid.locations.len()).map(move |si| (ti, si)))
        .collect();
    let preds = experiment.predict_test(&saved.state)?;
    Ok((experiment, preds))
}
