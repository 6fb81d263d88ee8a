//! TOML experiment configuration. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use physs_core::infer::{Curvature, Mode, NatgradSchedule};
use physs_core::kernels::{KernelFamily, KernelSpec};
use physs_core::physics::CATALOG;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub family: String,
    #[serde(default = "one")]
    pub lengthscale: f64,
    #[serde(default = "one")]
    pub variance: f64,
}

fn one() -> f64 {
    1.0
}

impl KernelConfig {
    pub fn to_spec(&self) -> Result<KernelSpec> {
        let family = parse_family(&self.family)?;
        Ok(match family {
            KernelFamily::IntegratedWiener { order } => KernelSpec::integrated_wiener(order, self.variance)?,
            f => KernelSpec::new(f, self.lengthscale, self.variance)?,
        })
    }
}

/// Accepts `matern12`..`matern72`, `se`/`rbf` and `iwp<order>`.
pub fn parse_family(name: &str) -> Result<KernelFamily> {
    Ok(match name {
        "matern12" => KernelFamily::Matern12,
        "matern32" => KernelFamily::Matern32,
        "matern52" => KernelFamily::Matern52,
        "matern72" => KernelFamily::Matern72,
        "se" | "rbf" => KernelFamily::SquaredExponential,
        other => match other.strip_prefix("iwp").map(|o| o.parse::<usize>()) {
            Some(Ok(order)) if order >= 1 => KernelFamily::IntegratedWiener { order },
            _ => return Err(CliError::Config(format!("unknown kernel family '{other}'"))),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentConfig {
    pub temporal: KernelConfig,
    #[serde(default)]
    pub spatial: Vec<KernelConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub observation: Vec<f64>,
    #[serde(default = "default_collocation_noise")]
    pub collocation: f64,
    #[serde(default = "default_boundary_noise")]
    pub boundary: f64,
}

fn default_collocation_noise() -> f64 {
    1e-3
}

fn default_boundary_noise() -> f64 {
    1e-4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Full,
    Sparse,
    Structured,
    Eks,
}

impl From<ModeName> for Mode {
    fn from(m: ModeName) -> Mode {
        match m {
            ModeName::Full => Mode::Full,
            ModeName::Sparse => Mode::Sparse,
            ModeName::Structured => Mode::Structured,
            ModeName::Eks => Mode::Eks,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureName {
    GaussNewton,
    Exact,
    ExactClipped,
}

impl From<CurvatureName> for Curvature {
    fn from(c: CurvatureName) -> Curvature {
        match c {
            CurvatureName::GaussNewton => Curvature::GaussNewton,
            CurvatureName::Exact => Curvature::Exact,
            CurvatureName::ExactClipped => Curvature::ExactClipped,
        }
    }
}

/// `[start, end, count]` evenly spaced values.
pub type Range1 = (f64, f64, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: ModeName,
    /// Catalog entry supplying the residual, mixing preset or probit constraint.
    #[serde(default)]
    pub residual: Option<String>,
    pub d_t: usize,
    #[serde(default = "one_usize")]
    pub d_s: usize,
    pub latents: Vec<LatentConfig>,
    pub noise: NoiseSection,
    #[serde(default = "default_curvature")]
    pub curvature: CurvatureName,
    #[serde(default)]
    pub mean_field: bool,
    #[serde(default = "default_iwp_variance")]
    pub iwp_initial_variance: f64,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default = "default_quadrature")]
    pub quadrature_order: usize,
    /// Spatial nodes as a product of per-axis ranges.
    #[serde(default)]
    pub inducing: Option<Vec<Range1>>,
    /// Scale of the probit monotonicity constraint.
    #[serde(default)]
    pub probit_scale: Option<f64>,
}

fn one_usize() -> usize {
    1
}
fn default_curvature() -> CurvatureName {
    CurvatureName::GaussNewton
}
fn default_iwp_variance() -> f64 {
    physs_core::kernels::IWP_INITIAL_VARIANCE
}
fn default_jitter() -> f64 {
    physs_core::linalg::DEFAULT_JITTER
}
fn default_quadrature() -> usize {
    physs_core::quadrature::DEFAULT_ORDER
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollocationConfig {
    pub time: Range1,
    #[serde(default)]
    pub space: Vec<Range1>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    /// Equal value and first spatial derivative at both ends of the collocation range.
    Periodic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub train: String,
    pub test: String,
    pub spatial_dims: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// `pendulum`, `dipole`, `allen_cahn`, `latent_force`, `monotonic`; omit when `csv` is given.
    #[serde(default)]
    pub simulator: Option<String>,
    #[serde(default)]
    pub params: Option<toml::Table>,
    #[serde(default)]
    pub csv: Option<CsvSource>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub collocation: Option<CollocationConfig>,
    #[serde(default)]
    pub boundary: Option<BoundaryKind>,
    /// Mixed-output component observed by each data output.
    #[serde(default)]
    pub observed_components: Option<Vec<usize>>,
    /// Mixed-output component scored by each test output.
    #[serde(default)]
    pub test_components: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NatgradConfig {
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub lr: f64,
}

impl Default for NatgradConfig {
    fn default() -> Self {
        let s = NatgradSchedule::default();
        NatgradConfig {
            warmup_epochs: s.warmup_epochs,
            warmup_lr: s.warmup_beta,
            lr: s.beta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam_lr: f64,
    pub inner_steps: usize,
    pub natgrad: NatgradConfig,
    pub noise_freeze_fraction: f64,
    pub fd_step: f64,
    /// Spatial mini-batch size.
    pub batch: Option<usize>,
    pub seed: u64,
    pub eval_every: usize,
    /// Hyperparameters held at their initial values.
    pub fixed: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            adam_lr: 0.01,
            inner_steps: 1,
            natgrad: NatgradConfig::default(),
            noise_freeze_fraction: 0.4,
            fd_step: 1e-4,
            batch: None,
            seed: 0,
            eval_every: 10,
            fixed: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub directory: Option<String>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| CliError::io(path.as_ref(), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(r) = &self.model.residual {
            if !CATALOG.contains(&r.as_str()) {
                return Err(CliError::Config(format!("residual '{r}' is not in the catalog {CATALOG:?}")));
            }
        }
        if self.model.latents.is_empty() {
            return Err(CliError::Config("at least one latent is required".into()));
        }
        for l in &self.model.latents {
            l.temporal.to_spec()?;
            for s in &l.spatial {
                s.to_spec()?;
            }
        }
        let f = self.train.noise_freeze_fraction;
        if !(0.0..1.0).contains(&f) {
            return Err(CliError::Config(format!("noise_freeze_fraction {f} outside [0, 1)")));
        }
        match (&self.data.simulator, &self.data.csv) {
            (Some(_), Some(_)) => return Err(CliError::Config("give either data.simulator or data.csv".into())),
            (None, None) => return Err(CliError::Config("data.simulator or data.csv is required".into())),
            _ => {}
        }
        Ok(())
    }
}
