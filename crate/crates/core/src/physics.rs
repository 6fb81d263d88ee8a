//! Generative model pieces: linear mixing of latent derivative processes,
//! differential-equation residuals, and the pointwise likelihoods that tie
//! data, collocation and boundary pseudo-observations to the mixed outputs.

use std::f64::consts::PI;
use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::stprior::{DerivativeOrders, GridData};

/// Default steepness of the monotonicity probit.
pub const DEFAULT_PROBIT_SCALE: f64 = 0.1;
/// Default damping of the pendulum residual.
pub const DEFAULT_PENDULUM_DAMPING: f64 = 0.2;

/// A (possibly nonlinear) differential-equation residual over selected
/// components of the mixed outputs. The residual must be affine in every
/// input outside [`ResidualFn::nonlinear_inputs`].
pub trait ResidualFn: Debug + Send + Sync {
    fn name(&self) -> &str;
    fn arity(&self) -> usize;
    fn outputs(&self) -> usize;
    fn eval(&self, v: &DVector<f64>) -> DVector<f64>;
    /// `outputs × arity`.
    fn jacobian(&self, v: &DVector<f64>) -> DMatrix<f64>;
    /// One `arity × arity` Hessian per output.
    fn hessians(&self, v: &DVector<f64>) -> Vec<DMatrix<f64>>;
    /// `Some(G)` when `eval(v) = G v`.
    fn linear_matrix(&self) -> Option<DMatrix<f64>> {
        None
    }
    fn nonlinear_inputs(&self) -> Vec<usize>;
    fn is_linear(&self) -> bool {
        self.linear_matrix().is_some()
    }
}

/// `θ'' + sin θ + b θ'` over inputs `(θ, θ', θ'')`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumResidual {
    pub damping: f64,
}

impl ResidualFn for PendulumResidual {
    fn name(&self) -> &str {
        "pendulum"
    }
    fn arity(&self) -> usize {
        3
    }
    fn outputs(&self) -> usize {
        1
    }
    fn eval(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, v[2] + v[0].sin() + self.damping * v[1])
    }
    fn jacobian(&self, v: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 3, &[v[0].cos(), self.damping, 1.0])
    }
    fn hessians(&self, v: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let mut h = DMatrix::zeros(3, 3);
        h[(0, 0)] = -v[0].sin();
        vec![h]
    }
    fn nonlinear_inputs(&self) -> Vec<usize> {
        vec![0]
    }
}

/// `u_t − ε u_xx + r u³ − r u` over inputs `(u, u_t, u_xx)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AllenCahnResidual {
    pub diffusion: f64,
    pub reaction: f64,
}

impl Default for AllenCahnResidual {
    fn default() -> Self {
        AllenCahnResidual {
            diffusion: 1e-5,
            reaction: 5.0,
        }
    }
}

impl ResidualFn for AllenCahnResidual {
    fn name(&self) -> &str {
        "allen_cahn"
    }
    fn arity(&self) -> usize {
        3
    }
    fn outputs(&self) -> usize {
        1
    }
    fn eval(&self, v: &DVector<f64>) -> DVector<f64> {
        let u = v[0];
        DVector::from_element(
            1,
            v[1] - self.diffusion * v[2] + self.reaction * (u * u * u - u),
        )
    }
    fn jacobian(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let u = v[0];
        DMatrix::from_row_slice(
            1,
            3,
            &[self.reaction * (3.0 * u * u - 1.0), 1.0, -self.diffusion],
        )
    }
    fn hessians(&self, v: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let mut h = DMatrix::zeros(3, 3);
        h[(0, 0)] = 6.0 * self.reaction * v[0];
        vec![h]
    }
    fn nonlinear_inputs(&self) -> Vec<usize> {
        vec![0]
    }
}

/// `G v` for a fixed matrix `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearResidual {
    pub name: String,
    pub matrix: DMatrix<f64>,
}

impl ResidualFn for LinearResidual {
    fn name(&self) -> &str {
        &self.name
    }
    fn arity(&self) -> usize {
        self.matrix.ncols()
    }
    fn outputs(&self) -> usize {
        self.matrix.nrows()
    }
    fn eval(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.matrix * v
    }
    fn jacobian(&self, _v: &DVector<f64>) -> DMatrix<f64> {
        self.matrix.clone()
    }
    fn hessians(&self, _v: &DVector<f64>) -> Vec<DMatrix<f64>> {
        vec![DMatrix::zeros(self.arity(), self.arity()); self.outputs()]
    }
    fn linear_matrix(&self) -> Option<DMatrix<f64>> {
        Some(self.matrix.clone())
    }
    fn nonlinear_inputs(&self) -> Vec<usize> {
        Vec::new()
    }
}

pub fn residual_pendulum(damping: f64) -> Arc<dyn ResidualFn> {
    Arc::new(PendulumResidual { damping })
}

pub fn residual_allen_cahn() -> Arc<dyn ResidualFn> {
    Arc::new(AllenCahnResidual::default())
}

/// `f₁'' + f₂` over inputs `(f₁'', f₂)`.
pub fn residual_latent_force() -> Arc<dyn ResidualFn> {
    Arc::new(LinearResidual {
        name: "latent_force".into(),
        matrix: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
    })
}

/// Names accepted by [`catalog_entry`].
pub const CATALOG: [&str; 7] = [
    "pendulum",
    "allen_cahn",
    "latent_force",
    "monotonic",
    "curl_free",
    "div_free",
    "helmholtz",
];

/// Vector-field mixing presets over a `(time, space)` input pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixingPreset {
    CurlFree,
    DivFree,
    Helmholtz,
}

/// What a catalog name contributes to a model.
#[derive(Debug, Clone)]
pub struct CatalogEntry {
    pub name: String,
    pub residual: Option<Arc<dyn ResidualFn>>,
    /// Components of the mixed outputs fed to the residual, in its input order.
    pub residual_inputs: Vec<usize>,
    pub mixing: Option<MixingPreset>,
    pub latents: usize,
    pub monotonic: bool,
}

/// Looks up a catalog entry and wires its residual inputs for `orders`
/// (outputs laid out latent-major, derivative `(j, i)` at `j · d_s + i`).
pub fn catalog_entry(name: &str, orders: DerivativeOrders) -> Result<CatalogEntry> {
    let d = orders.total();
    let ds = orders.d_s;
    let need_t = |k: usize| -> Result<()> {
        if orders.d_t <= k {
            return Err(Error::InsufficientDerivativeOrders(format!(
                "{name} needs {k} temporal derivatives, d_t = {}",
                orders.d_t
            )));
        }
        Ok(())
    };
    let base = CatalogEntry {
        name: name.to_string(),
        residual: None,
        residual_inputs: Vec::new(),
        mixing: None,
        latents: 1,
        monotonic: false,
    };
    match name {
        "pendulum" => {
            need_t(2)?;
            Ok(CatalogEntry {
                residual: Some(residual_pendulum(DEFAULT_PENDULUM_DAMPING)),
                residual_inputs: vec![0, ds, 2 * ds],
                ..base
            })
        }
        "allen_cahn" => {
            need_t(1)?;
            if ds < 3 {
                return Err(Error::InsufficientDerivativeOrders(
                    "allen_cahn needs second spatial derivatives".into(),
                ));
            }
            Ok(CatalogEntry {
                residual: Some(residual_allen_cahn()),
                residual_inputs: vec![0, ds, 2],
                ..base
            })
        }
        "latent_force" => {
            need_t(2)?;
            Ok(CatalogEntry {
                residual: Some(residual_latent_force()),
                residual_inputs: vec![2 * ds, d],
                latents: 2,
                ..base
            })
        }
        "monotonic" => {
            need_t(1)?;
            Ok(CatalogEntry {
                monotonic: true,
                ..base
            })
        }
        "curl_free" => Ok(CatalogEntry {
            mixing: Some(MixingPreset::CurlFree),
            ..base
        }),
        "div_free" => Ok(CatalogEntry {
            mixing: Some(MixingPreset::DivFree),
            ..base
        }),
        "helmholtz" => Ok(CatalogEntry {
            mixing: Some(MixingPreset::Helmholtz),
            latents: 2,
            ..base
        }),
        other => Err(Error::InvalidModel(format!("unknown residual '{other}'"))),
    }
}

/// `F = W f̄`.
pub fn mix(w: &DMatrix<f64>, latent_stack: &DVector<f64>) -> Result<DVector<f64>> {
    if w.ncols() != latent_stack.len() {
        return Err(Error::ShapeMismatch(format!(
            "mixing matrix has {} columns, latent vector has {} entries",
            w.ncols(),
            latent_stack.len()
        )));
    }
    Ok(w * latent_stack)
}

fn check_first_derivatives(orders: DerivativeOrders) -> Result<()> {
    if orders.d_t < 2 || orders.d_s < 2 {
        return Err(Error::InsufficientDerivativeOrders(format!(
            "vector fields need first derivatives along both inputs (d_t = {}, d_s = {})",
            orders.d_t, orders.d_s
        )));
    }
    Ok(())
}

/// Gradient field `[∂f/∂t, ∂f/∂s]` of one latent, `2 × D`.
pub fn curl_free_weights(orders: DerivativeOrders) -> Result<DMatrix<f64>> {
    check_first_derivatives(orders)?;
    let mut w = DMatrix::zeros(2, orders.total());
    w[(0, orders.d_s)] = 1.0;
    w[(1, 1)] = 1.0;
    Ok(w)
}

/// Rotated gradient `[∂f/∂s, −∂f/∂t]` of one latent, `2 × D`.
pub fn div_free_weights(orders: DerivativeOrders) -> Result<DMatrix<f64>> {
    let grad = curl_free_weights(orders)?;
    let rot = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
    Ok(rot * grad)
}

/// Sum of a curl-free and a divergence-free latent, `2 × 2D`.
pub fn helmholtz_weights(orders: DerivativeOrders) -> Result<DMatrix<f64>> {
    let g = curl_free_weights(orders)?;
    let r = div_free_weights(orders)?;
    let d = orders.total();
    let mut w = DMatrix::zeros(2, 2 * d);
    w.view_mut((0, 0), (2, d)).copy_from(&g);
    w.view_mut((0, d), (2, d)).copy_from(&r);
    Ok(w)
}

pub fn preset_weights(preset: MixingPreset, orders: DerivativeOrders) -> Result<DMatrix<f64>> {
    match preset {
        MixingPreset::CurlFree => curl_free_weights(orders),
        MixingPreset::DivFree => div_free_weights(orders),
        MixingPreset::Helmholtz => helmholtz_weights(orders),
    }
}

/// Selector with exactly one 1 per row.
pub fn selector(indices: &[usize], width: usize) -> Result<DMatrix<f64>> {
    let mut s = DMatrix::zeros(indices.len(), width);
    for (r, &c) in indices.iter().enumerate() {
        if c >= width {
            return Err(Error::ShapeMismatch(format!(
                "selector column {c} out of {width}"
            )));
        }
        s[(r, c)] = 1.0;
    }
    Ok(s)
}

/// Role of a likelihood term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TermKind {
    Observation,
    Collocation,
    Boundary,
    Monotonic,
}

/// Pointwise likelihood over a term's input vector `v`.
#[derive(Debug, Clone)]
pub enum Likelihood {
    /// `Σ_r log N(y_r | v_r, σ²_r)`; `noise[r]` indexes the noise table.
    Gaussian { y: DVector<f64>, noise: Vec<usize> },
    /// `Σ_r log N(0 | g_r(v), σ²)`.
    Residual {
        residual: Arc<dyn ResidualFn>,
        noise: usize,
    },
    /// `log Φ(v / scale)` for a scalar input.
    Probit { scale: f64 },
}

impl Likelihood {
    pub fn input_dim(&self) -> usize {
        match self {
            Likelihood::Gaussian { y, .. } => y.len(),
            Likelihood::Residual { residual, .. } => residual.arity(),
            Likelihood::Probit { .. } => 1,
        }
    }
}

/// Value, gradient and Hessian of a log-likelihood in its input.
#[derive(Debug, Clone)]
pub struct LogLikEval {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Evaluates `log p(y | v)` with analytic derivatives.
pub fn log_lik(lik: &Likelihood, v: &DVector<f64>, noise: &[f64]) -> Result<LogLikEval> {
    if v.len() != lik.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "likelihood over {} inputs evaluated at {}",
            lik.input_dim(),
            v.len()
        )));
    }
    let out = match lik {
        Likelihood::Gaussian { y, noise: idx } => {
            let n = y.len();
            let mut value = 0.0;
            let mut gradient = DVector::zeros(n);
            let mut hessian = DMatrix::zeros(n, n);
            for r in 0..n {
                let s2 = noise[idx[r]];
                let e = y[r] - v[r];
                value += -0.5 * (LN_2PI + s2.ln()) - 0.5 * e * e / s2;
                gradient[r] = e / s2;
                hessian[(r, r)] = -1.0 / s2;
            }
            LogLikEval {
                value,
                gradient,
                hessian,
            }
        }
        Likelihood::Residual {
            residual,
            noise: idx,
        } => {
            let s2 = noise[*idx];
            let g = residual.eval(v);
            let j = residual.jacobian(v);
            let hs = residual.hessians(v);
            let r = g.len();
            let value = -0.5 * r as f64 * (LN_2PI + s2.ln()) - 0.5 * g.norm_squared() / s2;
            let gradient = -(j.transpose() * &g) / s2;
            let mut hessian = -(j.transpose() * &j);
            for (k, h) in hs.iter().enumerate() {
                hessian -= h * g[k];
            }
            LogLikEval {
                value,
                gradient,
                hessian: hessian / s2,
            }
        }
        Likelihood::Probit { scale } => {
            let z = v[0] / scale;
            let (lp, mills) = log_phi_and_mills(z)?;
            LogLikEval {
                value: lp,
                gradient: DVector::from_element(1, mills / scale),
                hessian: DMatrix::from_element(1, 1, -mills * (z + mills) / (scale * scale)),
            }
        }
    };
    if !out.value.is_finite() || out.gradient.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteLikelihood(format!("{lik:?} at {v:?}")));
    }
    Ok(out)
}

/// `log Φ(z)` and the inverse Mills ratio `φ(z) / Φ(z)`, stable in both tails.
pub fn log_phi_and_mills(z: f64) -> Result<(f64, f64)> {
    if !z.is_finite() {
        if z == f64::INFINITY {
            return Ok((0.0, 0.0));
        }
        return Err(Error::NonFiniteLikelihood(format!("probit argument {z}")));
    }
    let log_pdf = -0.5 * z * z - 0.5 * LN_2PI;
    if z > -20.0 {
        let cdf = 0.5 * erfc(-z / std::f64::consts::SQRT_2);
        let lp = cdf.ln();
        Ok((lp, (log_pdf - lp).exp()))
    } else {
        // Φ(z) ≈ φ(z)/(−z) · (1 − 1/z² + 3/z⁴ − 15/z⁶ + 105/z⁸)
        let w = 1.0 / (z * z);
        let series = 1.0 - w * (1.0 - w * (3.0 - w * (15.0 - 105.0 * w)));
        let lp = log_pdf - (-z).ln() + series.ln();
        Ok((lp, -z / series))
    }
}

/// One likelihood factor at a single time over mixed outputs at one or more
/// spatial points. `select` maps the stacked outputs `[F(x_1); …; F(x_L)]`
/// to the likelihood input.
#[derive(Debug, Clone)]
pub struct Term {
    pub time: f64,
    pub points: Vec<Vec<f64>>,
    pub select: DMatrix<f64>,
    pub lik: Likelihood,
    pub kind: TermKind,
    /// Whether the term may be subsampled by spatial mini-batching.
    pub batchable: bool,
}

/// Noise variances of the generative model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub observation: Vec<f64>,
    pub collocation: f64,
    pub boundary: f64,
}

impl NoiseConfig {
    pub fn as_table(&self) -> Vec<f64> {
        let mut t = self.observation.clone();
        t.push(self.collocation);
        t.push(self.boundary);
        t
    }

    pub fn names(&self) -> Vec<String> {
        let mut n: Vec<String> = (0..self.observation.len())
            .map(|p| format!("noise.obs{p}"))
            .collect();
        n.push("noise.collocation".into());
        n.push("noise.boundary".into());
        n
    }

    pub fn observation_index(&self, p: usize) -> usize {
        p
    }

    pub fn collocation_index(&self) -> usize {
        self.observation.len()
    }

    pub fn boundary_index(&self) -> usize {
        self.observation.len() + 1
    }
}

/// Mixing, residual and likelihood configuration.
#[derive(Debug, Clone)]
pub struct GenerativeSpec {
    pub latents: usize,
    pub orders: DerivativeOrders,
    /// `out_dim × (Q · D)`.
    pub mixing: DMatrix<f64>,
    pub residual: Option<Arc<dyn ResidualFn>>,
    pub residual_inputs: Vec<usize>,
    /// Mixed-output component observed by each data output `p`.
    pub obs_outputs: Vec<usize>,
    pub probit_input: Option<usize>,
    pub probit_scale: f64,
    pub noise: NoiseConfig,
}

impl GenerativeSpec {
    /// Identity mixing over `latents · D` outputs.
    pub fn identity(
        latents: usize,
        orders: DerivativeOrders,
        obs_outputs: Vec<usize>,
        noise: NoiseConfig,
    ) -> Self {
        let n = latents * orders.total();
        GenerativeSpec {
            latents,
            orders,
            mixing: DMatrix::identity(n, n),
            residual: None,
            residual_inputs: Vec::new(),
            obs_outputs,
            probit_input: None,
            probit_scale: DEFAULT_PROBIT_SCALE,
            noise,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.mixing.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let qd = self.latents * self.orders.total();
        if self.mixing.ncols() != qd {
            return Err(Error::ShapeMismatch(format!(
                "mixing matrix has {} columns, expected Q·D = {qd}",
                self.mixing.ncols()
            )));
        }
        if self.obs_outputs.len() != self.noise.observation.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} observed outputs with {} noise variances",
                self.obs_outputs.len(),
                self.noise.observation.len()
            )));
        }
        for &c in self
            .obs_outputs
            .iter()
            .chain(self.residual_inputs.iter())
            .chain(self.probit_input.iter())
        {
            if c >= self.out_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "output component {c} out of {}",
                    self.out_dim()
                )));
            }
        }
        if let Some(r) = &self.residual {
            if r.arity() != self.residual_inputs.len() {
                return Err(Error::ShapeMismatch(format!(
                    "residual {} takes {} inputs, {} wired",
                    r.name(),
                    r.arity(),
                    self.residual_inputs.len()
                )));
            }
        }
        for v in self.noise.as_table() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidHyperparameter(format!("noise variance {v}")));
            }
        }
        Ok(())
    }

    /// Gaussian data terms for every observed `(t, s)` cell of `grid`.
    pub fn observation_terms(&self, grid: &GridData) -> Result<Vec<Term>> {
        if grid.outputs != self.obs_outputs.len() {
            return Err(Error::ShapeMismatch(format!(
                "grid has {} outputs, model observes {}",
                grid.outputs,
                self.obs_outputs.len()
            )));
        }
        let mut terms = Vec::new();
        for (ti, &t) in grid.times.iter().enumerate() {
            for (si, loc) in grid.locations.iter().enumerate() {
                let observed: Vec<usize> = (0..grid.outputs)
                    .filter(|&p| grid.value(ti, si, p).is_some())
                    .collect();
                if observed.is_empty() {
                    continue;
                }
                let cols: Vec<usize> = observed.iter().map(|&p| self.obs_outputs[p]).collect();
                let y = DVector::from_iterator(
                    observed.len(),
                    observed.iter().map(|&p| grid.value(ti, si, p).unwrap()),
                );
                terms.push(Term {
                    time: t,
                    points: vec![loc.clone()],
                    select: selector(&cols, self.out_dim())?,
                    lik: Likelihood::Gaussian {
                        y,
                        noise: observed
                            .iter()
                            .map(|&p| self.noise.observation_index(p))
                            .collect(),
                    },
                    kind: TermKind::Observation,
                    batchable: true,
                });
            }
        }
        Ok(terms)
    }

    /// Residual pseudo-observations at every `(time, point)` pair.
    pub fn collocation_terms(&self, times: &[f64], points: &[Vec<f64>]) -> Result<Vec<Term>> {
        let residual = self
            .residual
            .clone()
            .ok_or_else(|| Error::InvalidModel("collocation requires a residual".into()))?;
        let select = selector(&self.residual_inputs, self.out_dim())?;
        let mut terms = Vec::with_capacity(times.len() * points.len());
        for &t in times {
            for p in points {
                terms.push(Term {
                    time: t,
                    points: vec![p.clone()],
                    select: select.clone(),
                    lik: Likelihood::Residual {
                        residual: residual.clone(),
                        noise: self.noise.collocation_index(),
                    },
                    kind: TermKind::Collocation,
                    batchable: true,
                });
            }
        }
        Ok(terms)
    }

    /// Probit terms `Φ(F_c / v)` at every `(time, point)` pair.
    pub fn monotonic_terms(&self, times: &[f64], points: &[Vec<f64>]) -> Result<Vec<Term>> {
        let c = self
            .probit_input
            .ok_or_else(|| Error::InvalidModel("monotonic terms need a probit input".into()))?;
        let select = selector(&[c], self.out_dim())?;
        let mut terms = Vec::with_capacity(times.len() * points.len());
        for &t in times {
            for p in points {
                terms.push(Term {
                    time: t,
                    points: vec![p.clone()],
                    select: select.clone(),
                    lik: Likelihood::Probit {
                        scale: self.probit_scale,
                    },
                    kind: TermKind::Monotonic,
                    batchable: true,
                });
            }
        }
        Ok(terms)
    }

    /// Boundary pseudo-observation `y ≈ Σ_l c_l F_{k_l}(x_l)` at one time.
    pub fn boundary_term(
        &self,
        time: f64,
        parts: &[(Vec<f64>, usize, f64)],
        y: f64,
    ) -> Result<Term> {
        let mut points: Vec<Vec<f64>> = Vec::new();
        let mut entries = Vec::new();
        for (p, comp, coef) in parts {
            if *comp >= self.out_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "boundary component {comp} out of {}",
                    self.out_dim()
                )));
            }
            let l = match points.iter().position(|q| q == p) {
                Some(l) => l,
                None => {
                    points.push(p.clone());
                    points.len() - 1
                }
            };
            entries.push((l * self.out_dim() + comp, *coef));
        }
        let mut select = DMatrix::zeros(1, points.len() * self.out_dim());
        for (c, v) in entries {
            select[(0, c)] += v;
        }
        Ok(Term {
            time,
            points,
            select,
            lik: Likelihood::Gaussian {
                y: DVector::from_element(1, y),
                noise: vec![self.noise.boundary_index()],
            },
            kind: TermKind::Boundary,
            batchable: false,
        })
    }
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn pendulum_examples() {
        let r = PendulumResidual { damping: 0.2 };
        assert_eq!(r.eval(&v(&[0.0, 0.0, 0.0]))[0], 0.0);
        let undamped = PendulumResidual { damping: 0.0 };
        assert!(undamped.eval(&v(&[PI / 2.0, 0.0, -1.0]))[0].abs() < 1e-15);
        let j = r.jacobian(&v(&[0.3, 1.0, 2.0]));
        assert_eq!(j[(0, 1)], 0.2);
        assert_eq!(j[(0, 2)], 1.0);
        assert!((j[(0, 0)] - 0.3f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn allen_cahn_examples() {
        let r = AllenCahnResidual::default();
        assert_eq!(r.eval(&v(&[1.0, 0.0, 0.0]))[0], 0.0);
        assert!((r.eval(&v(&[0.0, 0.0, 3.0]))[0] + 3e-5).abs() < 1e-18);
        let j = r.jacobian(&v(&[0.5, 0.0, 0.0]));
        assert!((j[(0, 0)] - (15.0 * 0.25 - 5.0)).abs() < 1e-14);
        assert_eq!(j[(0, 2)], -1e-5);
    }

    #[test]
    fn latent_force_examples() {
        let r = residual_latent_force();
        assert_eq!(r.eval(&v(&[-1.0, 1.0]))[0], 0.0);
        let x = v(&[0.3, -2.0]);
        assert_eq!(r.eval(&(&x * 2.5))[0], 2.5 * r.eval(&x)[0]);
        assert!(r.is_linear());
    }

    #[test]
    fn mixing_examples() {
        let orders = DerivativeOrders::new(2, 2).unwrap();
        // latent derivatives [f, f_s, f_t, f_ts]; for f = t² + s² at (t, s) = (0.3, -0.4)
        let f = v(&[0.25, -0.8, 0.6, 0.0]);
        let grad = mix(&curl_free_weights(orders).unwrap(), &f).unwrap();
        assert_eq!(grad.as_slice(), &[0.6, -0.8]);
        let rot = mix(&div_free_weights(orders).unwrap(), &f).unwrap();
        assert_eq!(rot.as_slice(), &[-0.8, -0.6]);
        let eye = DMatrix::identity(4, 4);
        assert_eq!(mix(&eye, &f).unwrap(), f);
        assert!(mix(&eye, &v(&[1.0])).is_err());
        assert!(matches!(
            curl_free_weights(DerivativeOrders::new(2, 1).unwrap()),
            Err(Error::InsufficientDerivativeOrders(_))
        ));
    }

    #[test]
    fn gaussian_log_lik_at_mean() {
        let lik = Likelihood::Gaussian {
            y: v(&[0.7]),
            noise: vec![0],
        };
        let e = log_lik(&lik, &v(&[0.7]), &[1.0]).unwrap();
        assert!((e.value + 0.5 * LN_2PI).abs() < 1e-15);
        assert_eq!(e.hessian[(0, 0)], -1.0);
    }

    #[test]
    fn probit_tails() {
        let lik = Likelihood::Probit { scale: 0.1 };
        let e = log_lik(&lik, &v(&[1e3]), &[]).unwrap();
        assert!(e.value.abs() < 1e-300);
        let far = log_lik(&lik, &v(&[-10.0]), &[]).unwrap();
        assert!(far.value.is_finite() && far.value < -4000.0);
        let (lp, m) = log_phi_and_mills(-19.999).unwrap();
        let (lp2, m2) = log_phi_and_mills(-20.001).unwrap();
        assert!((lp - lp2).abs() < 0.05);
        assert!((m - m2).abs() < 0.01);
        assert!(log_phi_and_mills(f64::NAN).is_err());
    }

    #[test]
    fn catalog_knows_all_names() {
        let orders = DerivativeOrders::new(3, 3).unwrap();
        for name in CATALOG {
            catalog_entry(name, orders).unwrap();
        }
        assert!(catalog_entry("heat", orders).is_err());
    }
}
