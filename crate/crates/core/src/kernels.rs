//! Stationary kernels, their analytic derivative grams, and exact
//! state-space (LTI-SDE) representations of temporal kernels.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetrized;

/// Default diagonal of the diffuse initial covariance of integrated Wiener priors.
pub const IWP_INITIAL_VARIANCE: f64 = 1e4;

/// Largest derivative order per argument supported for the squared exponential.
const SE_MAX_ORDER: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelFamily {
    Matern12,
    Matern32,
    Matern52,
    Matern72,
    SquaredExponential,
    IntegratedWiener { order: usize },
}

impl KernelFamily {
    pub fn name(&self) -> String {
        match self {
            KernelFamily::Matern12 => "matern12".into(),
            KernelFamily::Matern32 => "matern32".into(),
            KernelFamily::Matern52 => "matern52".into(),
            KernelFamily::Matern72 => "matern72".into(),
            KernelFamily::SquaredExponential => "se".into(),
            KernelFamily::IntegratedWiener { order } => format!("iwp{order}"),
        }
    }

    /// Half-integer Matern index `p` with `nu = p + 1/2`.
    fn matern_p(&self) -> Option<usize> {
        match self {
            KernelFamily::Matern12 => Some(0),
            KernelFamily::Matern32 => Some(1),
            KernelFamily::Matern52 => Some(2),
            KernelFamily::Matern72 => Some(3),
            _ => None,
        }
    }

    pub fn is_stationary(&self) -> bool {
        !matches!(self, KernelFamily::IntegratedWiener { .. })
    }

    /// Highest derivative order allowed in each kernel argument.
    pub fn max_derivative_order(&self) -> usize {
        match self {
            KernelFamily::SquaredExponential => SE_MAX_ORDER,
            KernelFamily::IntegratedWiener { order } => *order,
            other => other.matern_p().unwrap_or(0),
        }
    }
}

/// Declarative kernel: family plus hyperparameters, acting on one input axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub lengthscale: f64,
    pub variance: f64,
    pub active_dim: usize,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, lengthscale: f64, variance: f64) -> Result<Self> {
        let spec = KernelSpec {
            family,
            lengthscale,
            variance,
            active_dim: 0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn integrated_wiener(order: usize, diffusion: f64) -> Result<Self> {
        Self::new(KernelFamily::IntegratedWiener { order }, 1.0, diffusion)
    }

    pub fn with_active_dim(mut self, dim: usize) -> Self {
        self.active_dim = dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lengthscale > 0.0 && self.lengthscale.is_finite()) {
            return Err(Error::InvalidHyperparameter(format!(
                "lengthscale must be positive, got {}",
                self.lengthscale
            )));
        }
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(Error::InvalidHyperparameter(format!(
                "variance must be positive, got {}",
                self.variance
            )));
        }
        if let KernelFamily::IntegratedWiener { order } = self.family {
            if order == 0 {
                return Err(Error::InvalidHyperparameter(
                    "integrated Wiener order must be at least 1".into(),
                ));
            }
        }
        Ok(())
    }

    fn require_stationary(&self) -> Result<()> {
        if self.family.is_stationary() {
            Ok(())
        } else {
            Err(Error::NonStationary(self.family.name()))
        }
    }

    /// `n`-th derivative of the stationary profile `k(r)` with respect to the
    /// signed lag `r = x - x2`.
    pub fn radial_derivative(&self, n: usize, r: f64) -> Result<f64> {
        self.require_stationary()?;
        let s2 = self.variance;
        let ell = self.lengthscale;
        if let Some(p) = self.family.matern_p() {
            if n > 2 * p {
                return Err(Error::OrderExceedsSmoothness {
                    family: self.family.name(),
                    order: n,
                });
            }
            let lambda = ((2 * p + 1) as f64).sqrt() / ell;
            let u = r.abs();
            // Odd derivatives below the smoothness limit vanish at the origin.
            if u == 0.0 && n % 2 == 1 {
                return Ok(0.0);
            }
            let poly = matern_derivative_poly(p, n);
            let v = lambda * u;
            let pv = poly.iter().rev().fold(0.0, |acc, c| acc * v + c);
            let sign = if r < 0.0 && n % 2 == 1 { -1.0 } else { 1.0 };
            return Ok(sign * s2 * lambda.powi(n as i32) * (-v).exp() * pv);
        }
        // Squared exponential: d^n/dr^n exp(-r²/2ℓ²) = (-1/ℓ)^n He_n(r/ℓ) exp(-r²/2ℓ²).
        if n > 2 * SE_MAX_ORDER {
            return Err(Error::OrderExceedsSmoothness {
                family: self.family.name(),
                order: n,
            });
        }
        let x = r / ell;
        let he = hermite_prob(n, x);
        let sign = if n % 2 == 1 { -1.0 } else { 1.0 };
        Ok(s2 * sign * ell.powi(-(n as i32)) * he * (-0.5 * x * x).exp())
    }

    /// `k(x, x2)` for stationary families.
    pub fn eval(&self, x: f64, x2: f64) -> Result<f64> {
        self.radial_derivative(0, x - x2)
    }

    /// `∂^a_x ∂^b_{x2} k(x, x2)`.
    pub fn eval_derivative(&self, x: f64, x2: f64, a: usize, b: usize) -> Result<f64> {
        self.check_order(a)?;
        self.check_order(b)?;
        let v = self.radial_derivative(a + b, x - x2)?;
        Ok(if b % 2 == 1 { -v } else { v })
    }

    fn check_order(&self, order: usize) -> Result<()> {
        if order > self.family.max_derivative_order() {
            return Err(Error::OrderExceedsSmoothness {
                family: self.family.name(),
                order,
            });
        }
        Ok(())
    }

    /// Derivative gram: entry `(i·L + a, j·R + b) = ∂^a_x ∂^b_{x2} k(x_i, x2_j)`
    /// where `L = left_orders`, `R = right_orders` are derivative counts
    /// (1 means the function value only).
    pub fn derivative_gram(
        &self,
        x: &[f64],
        x2: &[f64],
        left_orders: usize,
        right_orders: usize,
    ) -> Result<DMatrix<f64>> {
        self.require_stationary()?;
        if left_orders == 0 || right_orders == 0 {
            return Err(Error::ShapeMismatch(
                "derivative counts must be at least 1".into(),
            ));
        }
        self.check_order(left_orders - 1)?;
        self.check_order(right_orders - 1)?;
        let mut out = DMatrix::zeros(x.len() * left_orders, x2.len() * right_orders);
        for (i, &xi) in x.iter().enumerate() {
            for (j, &xj) in x2.iter().enumerate() {
                let r = xi - xj;
                for a in 0..left_orders {
                    for b in 0..right_orders {
                        let v = self.radial_derivative(a + b, r)?;
                        out[(i * left_orders + a, j * right_orders + b)] =
                            if b % 2 == 1 { -v } else { v };
                    }
                }
            }
        }
        Ok(out)
    }

    /// Continuous-time state-space form exposing `d_t` temporal derivatives.
    pub fn state_space_form(&self, d_t: usize) -> Result<ContinuousStateModel> {
        self.state_space_form_with(d_t, IWP_INITIAL_VARIANCE)
    }

    pub fn state_space_form_with(
        &self,
        d_t: usize,
        iwp_initial_variance: f64,
    ) -> Result<ContinuousStateModel> {
        self.validate()?;
        let (drift, qc) = match self.family {
            KernelFamily::IntegratedWiener { order } => {
                let d = order + 1;
                let mut f = DMatrix::zeros(d, d);
                for i in 0..d - 1 {
                    f[(i, i + 1)] = 1.0;
                }
                (f, self.variance)
            }
            KernelFamily::SquaredExponential => {
                return Err(Error::Unsupported(self.family.name()));
            }
            fam => {
                let p = fam.matern_p().expect("matern family");
                let d = p + 1;
                let lambda = ((2 * p + 1) as f64).sqrt() / self.lengthscale;
                let mut f = DMatrix::zeros(d, d);
                for i in 0..d - 1 {
                    f[(i, i + 1)] = 1.0;
                }
                // Companion form of (s + λ)^{p+1}.
                for k in 0..d {
                    f[(d - 1, k)] = -(binomial(d, k) as f64) * lambda.powi((d - k) as i32);
                }
                // Spectral density 2σ² λ^{2p+1} 4^p (p!)² / (2p)!.
                let fact_p = factorial(p);
                let q = 2.0
                    * self.variance
                    * lambda.powi((2 * p + 1) as i32)
                    * 4f64.powi(p as i32)
                    * fact_p
                    * fact_p
                    / factorial(2 * p);
                (f, q)
            }
        };
        let d = drift.nrows();
        if d_t == 0 || d_t > d {
            return Err(Error::OrderExceedsSmoothness {
                family: self.family.name(),
                order: d_t.saturating_sub(1),
            });
        }
        let mut dispersion = DMatrix::zeros(d, 1);
        dispersion[(d - 1, 0)] = 1.0;
        let diffusion_density = DMatrix::from_element(1, 1, qc);
        let mut emission = DMatrix::zeros(d_t, d);
        for i in 0..d_t {
            emission[(i, i)] = 1.0;
        }
        let noise = &dispersion * &diffusion_density * dispersion.transpose();
        let stationary_cov = if self.family.is_stationary() {
            Some(solve_lyapunov(&drift, &noise)?)
        } else {
            None
        };
        let initial_cov = match &stationary_cov {
            Some(p) => p.clone(),
            None => DMatrix::from_diagonal_element(d, d, iwp_initial_variance),
        };
        Ok(ContinuousStateModel {
            drift,
            dispersion,
            diffusion_density,
            emission,
            stationary_cov,
            initial_cov,
        })
    }
}

/// `k(x, x2)` for a stationary kernel spec.
pub fn kernel_eval(spec: &KernelSpec, x: f64, x2: f64) -> Result<f64> {
    spec.eval(x, x2)
}

/// Linear time-invariant SDE `dx = F x dt + L dβ` with spectral density `Qc`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousStateModel {
    pub drift: DMatrix<f64>,
    pub dispersion: DMatrix<f64>,
    pub diffusion_density: DMatrix<f64>,
    pub emission: DMatrix<f64>,
    pub stationary_cov: Option<DMatrix<f64>>,
    pub initial_cov: DMatrix<f64>,
}

impl ContinuousStateModel {
    pub fn state_dim(&self) -> usize {
        self.drift.nrows()
    }

    /// Exact discretisation over a step `dt ≥ 0`: `(A, Q)`.
    pub fn discretize(&self, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = self.state_dim();
        if dt == 0.0 {
            return (DMatrix::identity(d, d), DMatrix::zeros(d, d));
        }
        let a = (&self.drift * dt).exp();
        let q = match &self.stationary_cov {
            Some(pinf) => pinf - &a * pinf * a.transpose(),
            None => {
                // Van Loan: exp([[-F, LQcLᵀ], [0, Fᵀ]] dt) = [[·, M12], [0, M22]],
                // A = M22ᵀ, Q = M22ᵀ M12.
                let g = &self.dispersion * &self.diffusion_density * self.dispersion.transpose();
                let mut m = DMatrix::zeros(2 * d, 2 * d);
                m.view_mut((0, 0), (d, d)).copy_from(&(-&self.drift * dt));
                m.view_mut((0, d), (d, d)).copy_from(&(g * dt));
                m.view_mut((d, d), (d, d))
                    .copy_from(&(self.drift.transpose() * dt));
                let e = m.exp();
                let m12 = e.view((0, d), (d, d)).into_owned();
                let m22t = e.view((d, d), (d, d)).transpose();
                m22t * m12
            }
        };
        (a, symmetrized(q))
    }
}

/// Solves `F P + P Fᵀ + N = 0` by vectorisation.
pub fn solve_lyapunov(drift: &DMatrix<f64>, noise: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = drift.nrows();
    let eye = DMatrix::<f64>::identity(d, d);
    // vec(F P) = (I ⊗ F) vec(P), vec(P Fᵀ) = (F ⊗ I) vec(P) in column-major order.
    let system = eye.kronecker(drift) + drift.kronecker(&eye);
    let rhs = DVector::from_iterator(d * d, noise.iter().map(|v| -v));
    let sol = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::GramNotPsd("singular Lyapunov system".into()))?;
    Ok(symmetrized(DMatrix::from_column_slice(
        d,
        d,
        sol.as_slice(),
    )))
}

/// Coefficients (ascending powers of v = λ|r|) of the `n`-th |r|-derivative
/// of `exp(-v) Σ c_i v^i`, divided by `λ^n exp(-v)`.
fn matern_derivative_poly(p: usize, n: usize) -> Vec<f64> {
    let fp = factorial(p);
    let f2p = factorial(2 * p);
    let mut poly: Vec<f64> = (0..=p)
        .map(|i| {
            fp / f2p * factorial(2 * p - i) / (factorial(i) * factorial(p - i))
                * 2f64.powi(i as i32)
        })
        .collect();
    for _ in 0..n {
        // (e^{-v} P)' = e^{-v} (P' - P)
        let mut next = vec![0.0; poly.len()];
        for (i, c) in poly.iter().enumerate() {
            next[i] -= c;
            if i > 0 {
                next[i - 1] += i as f64 * c;
            }
        }
        poly = next;
    }
    poly
}

/// Probabilists' Hermite polynomial He_n(x).
fn hermite_prob(n: usize, x: f64) -> f64 {
    let (mut h0, mut h1) = (1.0, x);
    if n == 0 {
        return h0;
    }
    for k in 1..n {
        let h2 = x * h1 - k as f64 * h0;
        h0 = h1;
        h1 = h2;
    }
    h1
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

fn binomial(n: usize, k: usize) -> u64 {
    let mut out = 1u64;
    for i in 0..k {
        out = out * (n - i) as u64 / (i as u64 + 1);
    }
    out
}
