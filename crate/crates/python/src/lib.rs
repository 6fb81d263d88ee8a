//! Python bindings: kernels, a one-dimensional Kalman smoother, simulators and
//! config-driven experiments.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use physs_cli::config::{parse_family, ExperimentConfig};
use physs_cli::experiment::{simulate as run_simulator, Experiment as CoreExperiment};
use physs_cli::metrics::{metrics as score, MetricsReport};
use physs_cli::CliError;
use physs_core::infer::{predict, PredictOptions, Query, VariationalState};
use physs_core::kernels::KernelSpec;
use physs_core::ssm::{smooth, SurrogateSite};
use physs_core::stprior::{assemble_prior, DerivativeOrders, GridData, LatentPrior, PriorOptions, SpatialKernel};

fn core_err(e: physs_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn cli_err(e: CliError) -> PyErr {
    match e {
        CliError::Core(c) => core_err(c),
        other => PyRuntimeError::new_err(other.to_json()),
    }
}

fn report_dict(r: &MetricsReport) -> HashMap<&'static str, f64> {
    HashMap::from([
        ("rmse", r.rmse),
        ("nlpd", r.nlpd),
        ("crps", r.crps),
        ("r_squared", r.r_squared),
        ("wall_seconds", r.wall_seconds),
        ("epochs", r.epochs as f64),
    ])
}

/// Stationary one-dimensional kernel with derivative evaluations.
#[pyclass(name = "Kernel", frozen)]
struct PyKernel {
    spec: KernelSpec,
}

#[pymethods]
impl PyKernel {
    #[new]
    #[pyo3(signature = (family, lengthscale=1.0, variance=1.0))]
    fn new(family: &str, lengthscale: f64, variance: f64) -> PyResult<Self> {
        let family = parse_family(family).map_err(cli_err)?;
        let spec = KernelSpec::new(family, lengthscale, variance).map_err(core_err)?;
        Ok(PyKernel { spec })
    }

    fn __call__(&self, x: f64, x2: f64) -> PyResult<f64> {
        self.spec.eval(x, x2).map_err(core_err)
    }

    /// `∂^a_x ∂^b_x2 k(x, x2)`.
    #[pyo3(signature = (x, x2, a, b))]
    fn derivative(&self, x: f64, x2: f64, a: usize, b: usize) -> PyResult<f64> {
        self.spec.eval_derivative(x, x2, a, b).map_err(core_err)
    }

    #[getter]
    fn max_derivative_order(&self) -> usize {
        self.spec.family.max_derivative_order()
    }

    fn __repr__(&self) -> String {
        format!(
            "Kernel({:?}, lengthscale={}, variance={})",
            self.spec.family, self.spec.lengthscale, self.spec.variance
        )
    }
}

/// Posterior means, variances and log marginal likelihood of a temporal GP
/// observed with Gaussian noise, computed by Kalman filtering and smoothing.
#[pyfunction]
fn smooth_series(kernel: &PyKernel, times: Vec<f64>, y: Vec<f64>, noise: f64) -> PyResult<(Vec<f64>, Vec<f64>, f64)> {
    if times.len() != y.len() {
        return Err(PyValueError::new_err("times and y differ in length"));
    }
    let orders = DerivativeOrders::new(1, 1).map_err(core_err)?;
    let latents = vec![LatentPrior {
        temporal: kernel.spec.clone(),
        spatial: SpatialKernel::none(),
    }];
    let prior = assemble_prior(latents, orders, vec![vec![]], PriorOptions::full(orders), None).map_err(core_err)?;
    let model = prior.discrete_model(&times).map_err(core_err)?;
    let h = Arc::new(prior.site_emission());
    let noise = DMatrix::from_element(1, 1, noise);
    let sites = y
        .iter()
        .enumerate()
        .map(|(k, v)| SurrogateSite::from_moments(k, h.clone(), &DVector::from_element(1, *v), &noise))
        .collect::<Result<Vec<_>, _>>()
        .map_err(core_err)?;
    let out = smooth(&model, &sites).map_err(core_err)?;
    let mean = out.marginals.iter().map(|m| m.mean[0]).collect();
    let var = out.marginals.iter().map(|m| m.cov[(0, 0)]).collect();
    Ok((mean, var, out.log_marginal))
}

/// A space-time grid of outputs; missing cells are `None`.
#[pyclass(name = "Grid", frozen)]
struct PyGrid {
    grid: GridData,
    names: Vec<String>,
}

#[pymethods]
impl PyGrid {
    #[getter]
    fn times(&self) -> Vec<f64> {
        self.grid.times.clone()
    }

    #[getter]
    fn locations(&self) -> Vec<Vec<f64>> {
        self.grid.locations.clone()
    }

    #[getter]
    fn output_names(&self) -> Vec<String> {
        self.names.clone()
    }

    /// Values shaped `[time][location][output]`.
    #[getter]
    fn values(&self) -> Vec<Vec<Vec<Option<f64>>>> {
        let g = &self.grid;
        (0..g.times.len())
            .map(|t| {
                (0..g.locations.len())
                    .map(|s| (0..g.outputs).map(|p| g.value(t, s, p)).collect())
                    .collect()
            })
            .collect()
    }
}

/// Runs a named simulator and returns `(train, test)` grids.
#[pyfunction]
#[pyo3(signature = (name, seed=0))]
fn simulate(name: &str, seed: u64) -> PyResult<(PyGrid, PyGrid)> {
    let d = run_simulator(name, &None, seed).map_err(cli_err)?;
    Ok((
        PyGrid {
            grid: d.train,
            names: d.output_names.clone(),
        },
        PyGrid {
            grid: d.test,
            names: d.output_names,
        },
    ))
}

/// RMSE, NLPD, CRPS and R² of Gaussian predictions.
#[pyfunction]
fn metrics(mean: Vec<f64>, std: Vec<f64>, truth: Vec<f64>) -> PyResult<HashMap<&'static str, f64>> {
    score(&mean, &std, &truth).map(|r| report_dict(&r)).map_err(cli_err)
}

/// A model built from a TOML experiment config.
#[pyclass(name = "Experiment", unsendable)]
struct PyExperiment {
    inner: CoreExperiment,
    state: Option<VariationalState>,
    trace: Vec<(usize, f64)>,
}

#[pymethods]
impl PyExperiment {
    /// Parses a config document and builds the model and its dataset.
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let mut config = ExperimentConfig::from_toml(text).map_err(cli_err)?;
        config.output.directory = None;
        let inner = CoreExperiment::build(&config).map_err(cli_err)?;
        Ok(PyExperiment {
            inner,
            state: None,
            trace: Vec::new(),
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PyValueError::new_err(format!("{path}: {e}")))?;
        Self::from_toml(&text)
    }

    /// Overrides the number of training epochs.
    #[setter]
    fn set_epochs(&mut self, epochs: usize) {
        self.inner.config.train.epochs = epochs;
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.config.train.epochs
    }

    /// Trains from the current state (or a fresh one) and returns test metrics.
    fn fit(&mut self) -> PyResult<HashMap<&'static str, f64>> {
        let out = self.inner.train(self.state.take()).map_err(cli_err)?;
        self.trace.extend(out.trace.iter().map(|r| (r.epoch, r.elbo)));
        if let Some(e) = out.diverged {
            return Err(core_err(e));
        }
        let preds = self.inner.predict_test(&out.state).map_err(cli_err)?;
        let mut report = self.inner.score(&preds).map_err(cli_err)?;
        report.epochs = out.state.epoch;
        self.state = Some(out.state);
        Ok(report_dict(&report))
    }

    /// `(epoch, elbo)` pairs recorded during training.
    #[getter]
    fn trace(&self) -> Vec<(usize, f64)> {
        self.trace.clone()
    }

    /// Posterior means and standard deviations of the test components at
    /// each `(time, point)` query.
    fn predict(&self, times: Vec<f64>, points: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        if times.len() != points.len() {
            return Err(PyValueError::new_err("times and points differ in length"));
        }
        let state = match &self.state {
            Some(s) => s.clone(),
            None => self.inner.initial_state().map_err(cli_err)?,
        };
        let queries: Vec<Query> = times.iter().zip(points).map(|(t, x)| Query::at(*t, x)).collect();
        let preds = predict(
            &self.inner.problem,
            &state,
            &queries,
            &self.inner.test_components,
            PredictOptions::default(),
        )
        .map_err(core_err)?;
        let means = preds.iter().map(|p| p.mean.iter().copied().collect()).collect();
        let stds = preds
            .iter()
            .map(|p| (0..p.mean.len()).map(|i| p.variance(i).sqrt()).collect())
            .collect();
        Ok((means, stds))
    }
}

#[pymodule]
fn physs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyKernel>()?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(smooth_series, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    Ok(())
}
