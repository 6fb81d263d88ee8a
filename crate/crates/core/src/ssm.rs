//! Kalman filtering and RTS smoothing with natural-form Gaussian sites,
//! plus the linearised (extended) update for nonlinear observations.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{log_det_from_cholesky, robust_cholesky, symmetrize, DEFAULT_JITTER};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative eigenvalue threshold below which site precision directions are
/// treated as uninformative.
const SITE_RANK_TOL: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        GaussianBelief { mean, cov }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Marginal of `H x`.
    pub fn project(&self, h: &DMatrix<f64>) -> GaussianBelief {
        let hp = h * &self.cov;
        let mut cov = &hp * h.transpose();
        symmetrize(&mut cov);
        GaussianBelief {
            mean: h * &self.mean,
            cov,
        }
    }
}

/// Gaussian pseudo-observation of `z = emission · x_t` stored in natural
/// form: `exp(hᵀz − ½ zᵀΛz)`. Zero precision encodes "no information".
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateSite {
    pub time_index: usize,
    pub emission: Arc<DMatrix<f64>>,
    pub precision: DMatrix<f64>,
    pub shift: DVector<f64>,
}

impl SurrogateSite {
    pub fn uninformative(time_index: usize, emission: Arc<DMatrix<f64>>) -> Self {
        let m = emission.nrows();
        SurrogateSite {
            time_index,
            emission,
            precision: DMatrix::zeros(m, m),
            shift: DVector::zeros(m),
        }
    }

    /// Site from moment form `N(pseudo_obs | z, pseudo_cov)`.
    pub fn from_moments(
        time_index: usize,
        emission: Arc<DMatrix<f64>>,
        pseudo_obs: &DVector<f64>,
        pseudo_cov: &DMatrix<f64>,
    ) -> Result<Self> {
        let chol = robust_cholesky(pseudo_cov, DEFAULT_JITTER)
            .ok_or_else(|| Error::GramNotPsd("site covariance".into()))?;
        let precision = chol.inverse();
        let shift = &precision * pseudo_obs;
        Ok(SurrogateSite {
            time_index,
            emission,
            precision,
            shift,
        })
    }

    pub fn dim(&self) -> usize {
        self.emission.nrows()
    }

    pub fn is_uninformative(&self) -> bool {
        self.precision.iter().all(|v| *v == 0.0)
    }

    /// Equivalent whitened linear-Gaussian observation `y' = H' x + e`,
    /// `e ~ N(0, I)`, together with `½ Σ log s_i` (the log-Jacobian that maps
    /// the whitened likelihood back to `N(Ỹ | z, Ṽ)` on the informative subspace).
    pub fn whitened(&self) -> (DMatrix<f64>, DVector<f64>, f64) {
        let m = self.dim();
        let mut prec = self.precision.clone();
        symmetrize(&mut prec);
        let eig = SymmetricEigen::new(prec);
        let max_eig = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        let keep: Vec<usize> = if max_eig > 0.0 {
            (0..m)
                .filter(|&i| eig.eigenvalues[i] > SITE_RANK_TOL * max_eig)
                .collect()
        } else {
            Vec::new()
        };
        let k = keep.len();
        let mut rows = DMatrix::zeros(k, m);
        let mut y = DVector::zeros(k);
        let mut half_log = 0.0;
        for (r, &i) in keep.iter().enumerate() {
            let s = eig.eigenvalues[i];
            let u = eig.eigenvectors.column(i);
            let sq = s.sqrt();
            for j in 0..m {
                rows[(r, j)] = sq * u[j];
            }
            y[r] = u.dot(&self.shift) / sq;
            half_log += 0.5 * s.ln();
        }
        (rows * self.emission.as_ref(), y, half_log)
    }
}

/// Per-step discrete transitions of a linear-Gaussian state-space prior.
/// `transitions[k]` maps step `k` to step `k + 1`; identical steps share storage.
#[derive(Debug, Clone)]
pub struct DiscreteStateModel {
    pub initial: GaussianBelief,
    pub transitions: Vec<Arc<(DMatrix<f64>, DMatrix<f64>)>>,
}

impl DiscreteStateModel {
    pub fn num_steps(&self) -> usize {
        self.transitions.len() + 1
    }

    pub fn state_dim(&self) -> usize {
        self.initial.dim()
    }

    /// Prior marginals at every step.
    pub fn prior_marginals(&self) -> Vec<GaussianBelief> {
        let mut out = Vec::with_capacity(self.num_steps());
        let mut b = self.initial.clone();
        out.push(b.clone());
        for tr in &self.transitions {
            b = predict(&b, &tr.0, &tr.1);
            out.push(b.clone());
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct FilterResult {
    pub filtered: Vec<GaussianBelief>,
    pub log_marginal: f64,
}

#[derive(Debug, Clone)]
pub struct SmoothingResult {
    pub marginals: Vec<GaussianBelief>,
    pub log_marginal: f64,
    /// `cross_cov[k] = Cov(x_k, x_{k+1})` under the smoothing distribution.
    pub pairwise_cross_cov: Option<Vec<DMatrix<f64>>>,
}

pub fn predict(belief: &GaussianBelief, a: &DMatrix<f64>, q: &DMatrix<f64>) -> GaussianBelief {
    let mean = a * &belief.mean;
    let mut cov = a * &belief.cov * a.transpose() + q;
    symmetrize(&mut cov);
    GaussianBelief { mean, cov }
}

/// Linear-Gaussian update with `y = H x + e`, `e ~ N(0, R)`, in Joseph form.
/// Returns the posterior and `log N(y | H m, H P Hᵀ + R)`.
pub fn linear_update(
    belief: &GaussianBelief,
    h: &DMatrix<f64>,
    y: &DVector<f64>,
    r: &DMatrix<f64>,
    step: usize,
) -> Result<(GaussianBelief, f64)> {
    if h.nrows() == 0 {
        return Ok((belief.clone(), 0.0));
    }
    if h.ncols() != belief.dim() || y.len() != h.nrows() || r.nrows() != h.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "update with H {}x{}, y {}, R {}x{} on state {}",
            h.nrows(),
            h.ncols(),
            y.len(),
            r.nrows(),
            r.ncols(),
            belief.dim()
        )));
    }
    let ph_t = &belief.cov * h.transpose();
    let mut s = h * &ph_t + r;
    symmetrize(&mut s);
    let chol = robust_cholesky(&s, DEFAULT_JITTER).ok_or(Error::InnovationNotPsd { step })?;
    let innov = y - h * &belief.mean;
    let alpha = chol.solve(&innov);
    let log_lik = -0.5 * innov.dot(&alpha)
        - 0.5 * log_det_from_cholesky(&chol)
        - 0.5 * y.len() as f64 * LN_2PI;
    // K = P Hᵀ S⁻¹
    let gain = chol.solve(&ph_t.transpose()).transpose();
    let mean = &belief.mean + &gain * innov;
    let n = belief.dim();
    let i_kh = DMatrix::identity(n, n) - &gain * h;
    let mut cov = &i_kh * &belief.cov * i_kh.transpose() + &gain * r * gain.transpose();
    symmetrize(&mut cov);
    Ok((GaussianBelief { mean, cov }, log_lik))
}

/// Conditions on a natural-form site. Returns the posterior and the site's
/// contribution `log N(Ỹ | H m⁻, H P⁻ Hᵀ + Ṽ)` (zero for uninformative sites).
pub fn site_update(
    belief: &GaussianBelief,
    site: &SurrogateSite,
    step: usize,
) -> Result<(GaussianBelief, f64)> {
    let (h, y, half_log) = site.whitened();
    if h.nrows() == 0 {
        return Ok((belief.clone(), 0.0));
    }
    let r = DMatrix::identity(h.nrows(), h.nrows());
    let (b, ll) = linear_update(belief, &h, &y, &r, step)?;
    Ok((b, ll + half_log))
}

/// Extended-Kalman update for `obs = g(H x) + e`, `e ~ N(0, obs_noise)`,
/// linearised at the current mean. `g` returns the residual value and its
/// Jacobian with respect to `z = H x`.
pub fn ek_update<G>(
    belief: &GaussianBelief,
    emission: &DMatrix<f64>,
    g: G,
    obs: &DVector<f64>,
    obs_noise: &DMatrix<f64>,
    step: usize,
) -> Result<(GaussianBelief, f64)>
where
    G: Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>),
{
    let z = emission * &belief.mean;
    let (value, jac) = g(&z);
    let h = &jac * emission;
    // Linearisation g(Hx) ≈ value + J H (x − m) turns into y_eff = obs − value + J H m.
    let y_eff = obs - value + &h * &belief.mean;
    linear_update(belief, &h, &y_eff, obs_noise, step)
}

/// Forward pass with an arbitrary per-step update; `update(k, predicted)`
/// returns the filtered belief at step `k` and its log-likelihood term.
pub fn filter_with<U>(model: &DiscreteStateModel, mut update: U) -> Result<FilterResult>
where
    U: FnMut(usize, GaussianBelief) -> Result<(GaussianBelief, f64)>,
{
    let n = model.num_steps();
    let mut filtered = Vec::with_capacity(n);
    let mut log_marginal = 0.0;
    let mut belief = model.initial.clone();
    for k in 0..n {
        if k > 0 {
            let tr = &model.transitions[k - 1];
            belief = predict(&belief, &tr.0, &tr.1);
        }
        let (b, ll) = update(k, belief)?;
        log_marginal += ll;
        filtered.push(b.clone());
        belief = b;
    }
    Ok(FilterResult {
        filtered,
        log_marginal,
    })
}

/// Kalman filter over natural-form sites sorted by `time_index`; several
/// sites may share one step.
pub fn kalman_filter(model: &DiscreteStateModel, sites: &[SurrogateSite]) -> Result<FilterResult> {
    if sites.windows(2).any(|w| w[0].time_index > w[1].time_index) {
        return Err(Error::ShapeMismatch(
            "sites must be sorted by time index".into(),
        ));
    }
    if let Some(last) = sites.last() {
        if last.time_index >= model.num_steps() {
            return Err(Error::ShapeMismatch(format!(
                "site at step {} beyond {} steps",
                last.time_index,
                model.num_steps()
            )));
        }
    }
    let mut cursor = 0;
    filter_with(model, |k, mut belief| {
        let mut ll = 0.0;
        while cursor < sites.len() && sites[cursor].time_index == k {
            let (b, l) = site_update(&belief, &sites[cursor], k)?;
            belief = b;
            ll += l;
            cursor += 1;
        }
        Ok((belief, ll))
    })
}

/// Rauch–Tung–Striebel backward pass.
pub fn rts_smooth(model: &DiscreteStateModel, filter: &FilterResult) -> Result<SmoothingResult> {
    let n = filter.filtered.len();
    if n != model.num_steps() {
        return Err(Error::ShapeMismatch(format!(
            "{} filtered beliefs for {} steps",
            n,
            model.num_steps()
        )));
    }
    let mut marginals = filter.filtered.clone();
    let mut cross = vec![DMatrix::zeros(0, 0); n.saturating_sub(1)];
    for k in (0..n.saturating_sub(1)).rev() {
        let (a, q) = (&model.transitions[k].0, &model.transitions[k].1);
        let f = &filter.filtered[k];
        let pred = predict(f, a, q);
        let chol = robust_cholesky(&pred.cov, DEFAULT_JITTER)
            .ok_or(Error::InnovationNotPsd { step: k + 1 })?;
        // G = P_k Aᵀ (P⁻_{k+1})⁻¹
        let pa_t = &f.cov * a.transpose();
        let gain = chol.solve(&pa_t.transpose()).transpose();
        let next = &marginals[k + 1];
        let mean = &f.mean + &gain * (&next.mean - &pred.mean);
        let mut cov = &f.cov + &gain * (&next.cov - &pred.cov) * gain.transpose();
        symmetrize(&mut cov);
        cross[k] = &gain * &next.cov;
        marginals[k] = GaussianBelief { mean, cov };
    }
    Ok(SmoothingResult {
        marginals,
        log_marginal: filter.log_marginal,
        pairwise_cross_cov: Some(cross),
    })
}

/// Filter then smooth.
pub fn smooth(model: &DiscreteStateModel, sites: &[SurrogateSite]) -> Result<SmoothingResult> {
    let f = kalman_filter(model, sites)?;
    rts_smooth(model, &f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn scalar_model(n: usize) -> DiscreteStateModel {
        DiscreteStateModel {
            initial: GaussianBelief::new(DVector::zeros(1), scalar(1.0)),
            transitions: vec![Arc::new((scalar(1.0), scalar(0.0))); n - 1],
        }
    }

    #[test]
    fn exact_observation_pins_mean() {
        let model = scalar_model(1);
        let e = Arc::new(scalar(1.0));
        let site =
            SurrogateSite::from_moments(0, e, &DVector::from_element(1, 2.0), &scalar(1e-14))
                .unwrap();
        let f = kalman_filter(&model, &[site]).unwrap();
        assert!((f.filtered[0].mean[0] - 2.0).abs() < 1e-10);
        assert!(f.filtered[0].cov[(0, 0)] < 1e-12);
    }

    #[test]
    fn uninformative_sites_return_prior() {
        let model = scalar_model(3);
        let e = Arc::new(scalar(1.0));
        let sites: Vec<_> = (0..3)
            .map(|k| SurrogateSite::uninformative(k, e.clone()))
            .collect();
        let s = smooth(&model, &sites).unwrap();
        assert_eq!(s.log_marginal, 0.0);
        for m in &s.marginals {
            assert_eq!(m.mean[0], 0.0);
            assert!((m.cov[(0, 0)] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn site_log_marginal_matches_moment_form() {
        let prior = GaussianBelief::new(
            DVector::from_vec(vec![0.3, -0.2]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 2.0]),
        );
        let e = Arc::new(DMatrix::identity(2, 2));
        let y = DVector::from_vec(vec![1.0, 0.5]);
        let v = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
        let site = SurrogateSite::from_moments(0, e, &y, &v).unwrap();
        let (_, ll) = site_update(&prior, &site, 0).unwrap();
        let (_, direct) = linear_update(&prior, &DMatrix::identity(2, 2), &y, &v, 0).unwrap();
        assert!((ll - direct).abs() < 1e-12);
    }

    #[test]
    fn ek_update_is_exact_for_linear_maps() {
        let prior = GaussianBelief::new(
            DVector::from_vec(vec![0.3, -0.2]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 2.0]),
        );
        let g = DMatrix::from_row_slice(1, 2, &[2.0, -1.0]);
        let obs = DVector::from_element(1, 0.7);
        let r = scalar(0.1);
        let gc = g.clone();
        let (ek, ll_ek) = ek_update(
            &prior,
            &DMatrix::identity(2, 2),
            |z| (&gc * z, gc.clone()),
            &obs,
            &r,
            0,
        )
        .unwrap();
        let (kf, ll_kf) = linear_update(&prior, &g, &obs, &r, 0).unwrap();
        assert!((ek.mean - kf.mean).abs().max() < 1e-14);
        assert!((ek.cov - kf.cov).abs().max() < 1e-14);
        assert!((ll_ek - ll_kf).abs() < 1e-14);

        let (id, _) = ek_update(
            &prior,
            &DMatrix::identity(2, 2),
            |z| (z.clone(), DMatrix::identity(2, 2)),
            &DVector::from_vec(vec![1.0, 2.0]),
            &DMatrix::identity(2, 2).scale(1e-14),
            0,
        )
        .unwrap();
        assert!((id.mean[0] - 1.0).abs() < 1e-8 && (id.mean[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn exactly_observed_midpoint_survives_smoothing() {
        let model = DiscreteStateModel {
            initial: GaussianBelief::new(DVector::zeros(1), scalar(1.0)),
            transitions: vec![Arc::new((scalar(0.8), scalar(0.36))); 4],
        };
        let e = Arc::new(scalar(1.0));
        let site =
            SurrogateSite::from_moments(2, e, &DVector::from_element(1, 1.5), &scalar(1e-13))
                .unwrap();
        let s = smooth(&model, &[site]).unwrap();
        assert!((s.marginals[2].mean[0] - 1.5).abs() < 1e-9);
        assert!((s.marginals[1].mean[0] - 1.2).abs() < 1e-6);
    }

    #[test]
    fn unsorted_sites_are_rejected() {
        let model = scalar_model(3);
        let e = Arc::new(scalar(1.0));
        let sites = vec![
            SurrogateSite::uninformative(2, e.clone()),
            SurrogateSite::uninformative(1, e),
        ];
        assert!(kalman_filter(&model, &sites).is_err());
    }
}
