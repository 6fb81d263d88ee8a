//! Dense reference computations used by tests and acceptance runs: exact
//! conjugate GP regression with derivative kernels and mixing, and Monte
//! Carlo estimates of expected log-likelihoods.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{log_det_from_cholesky, robust_cholesky, symmetrize, DEFAULT_JITTER};
use crate::physics::{log_lik, GenerativeSpec, Likelihood, Term};
use crate::stprior::{LatentPrior, SpatialKernel};

/// Largest latent dimension (locations × derivatives × latents) the oracle accepts.
pub const MAX_ORACLE_DIM: usize = 2000;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Output request for [`dense_posterior`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseQuery {
    pub time: f64,
    pub point: Vec<f64>,
    pub components: Vec<usize>,
}

/// Joint prior over stacked latent derivatives at every location.
#[derive(Debug, Clone)]
pub struct DenseJoint {
    /// Rows ordered (location, latent, temporal order, spatial order).
    pub full_cov: DMatrix<f64>,
    pub locations: Vec<(f64, Vec<f64>)>,
    pub per_location: usize,
}

/// Result of exact conjugate regression.
#[derive(Debug, Clone)]
pub struct DensePosterior {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    pub log_marginal: f64,
}

fn spatial_entry(k: &SpatialKernel, x: &[f64], x2: &[f64], a: usize, b: usize) -> Result<f64> {
    if k.factors.is_empty() {
        return Ok(if a == 0 && b == 0 { 1.0 } else { 0.0 });
    }
    let mut v = 1.0;
    for (axis, f) in k.factors.iter().enumerate() {
        v *= if axis == k.deriv_axis {
            f.eval_derivative(x[axis], x2[axis], a, b)?
        } else {
            f.eval(x[axis], x2[axis])?
        };
    }
    Ok(v)
}

fn loc_key(t: f64, x: &[f64]) -> Vec<u64> {
    std::iter::once(t.to_bits())
        .chain(x.iter().map(|v| v.to_bits()))
        .collect()
}

/// Builds the dense prior over `locations`, entry by entry.
pub fn dense_joint(
    latents: &[LatentPrior],
    spec: &GenerativeSpec,
    locations: Vec<(f64, Vec<f64>)>,
) -> Result<DenseJoint> {
    let (d_t, d_s) = (spec.orders.d_t, spec.orders.d_s);
    let dd = spec.orders.total();
    let per = latents.len() * dd;
    let n = locations.len() * per;
    if n > MAX_ORACLE_DIM {
        return Err(Error::OracleTooLarge(n));
    }
    let mut cov = DMatrix::zeros(n, n);
    for (l, (t, x)) in locations.iter().enumerate() {
        for (l2, (t2, x2)) in locations.iter().enumerate().skip(l) {
            for (q, lp) in latents.iter().enumerate() {
                for j in 0..d_t {
                    for j2 in 0..d_t {
                        let kt = lp.temporal.eval_derivative(*t, *t2, j, j2)?;
                        for i in 0..d_s {
                            for i2 in 0..d_s {
                                let v = kt * spatial_entry(&lp.spatial, x, x2, i, i2)?;
                                let r = l * per + q * dd + j * d_s + i;
                                let c = l2 * per + q * dd + j2 * d_s + i2;
                                cov[(r, c)] = v;
                                cov[(c, r)] = v;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(DenseJoint {
        full_cov: cov,
        locations,
        per_location: per,
    })
}

/// Exact posterior of mixed outputs given Gaussian and linear-residual terms.
pub fn dense_posterior(
    latents: &[LatentPrior],
    spec: &GenerativeSpec,
    noise: &[f64],
    terms: &[Term],
    queries: &[DenseQuery],
) -> Result<DensePosterior> {
    let mut locations: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut locate = |t: f64, x: &[f64]| -> usize {
        *index.entry(loc_key(t, x)).or_insert_with(|| {
            locations.push((t, x.to_vec()));
            locations.len() - 1
        })
    };
    let term_locs: Vec<Vec<usize>> = terms
        .iter()
        .map(|term| term.points.iter().map(|p| locate(term.time, p)).collect())
        .collect();
    let query_locs: Vec<usize> = queries.iter().map(|q| locate(q.time, &q.point)).collect();
    let joint = dense_joint(latents, spec, locations)?;
    let per = joint.per_location;
    let total = joint.full_cov.nrows();
    let w = &spec.mixing;
    let out = w.nrows();

    // Stacked observation operator and noise.
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    let mut noise_diag: Vec<f64> = Vec::new();
    for (term, locs) in terms.iter().zip(&term_locs) {
        // Term inputs as a linear map of the latent vector.
        let mut mixed = DMatrix::zeros(locs.len() * out, total);
        for (l, &loc) in locs.iter().enumerate() {
            mixed
                .view_mut((l * out, loc * per), (out, per))
                .copy_from(w);
        }
        let inputs = &term.select * mixed;
        match &term.lik {
            Likelihood::Gaussian { y, noise: idx } => {
                for r in 0..y.len() {
                    rows.push(inputs.row(r).transpose());
                    targets.push(y[r]);
                    noise_diag.push(noise[idx[r]]);
                }
            }
            Likelihood::Residual {
                residual,
                noise: idx,
            } => {
                let g = residual.linear_matrix().ok_or_else(|| {
                    Error::Unsupported("dense oracle needs linear residuals".into())
                })?;
                let op = g * inputs;
                for r in 0..op.nrows() {
                    rows.push(op.row(r).transpose());
                    targets.push(0.0);
                    noise_diag.push(noise[*idx]);
                }
            }
            Likelihood::Probit { .. } => {
                return Err(Error::Unsupported(
                    "dense oracle needs Gaussian likelihoods".into(),
                ))
            }
        }
    }
    let k = &joint.full_cov;
    let query_ops: Vec<DMatrix<f64>> = queries
        .iter()
        .zip(&query_locs)
        .map(|(q, &loc)| {
            let mut op = DMatrix::zeros(q.components.len(), total);
            for (r, &c) in q.components.iter().enumerate() {
                for col in 0..per {
                    op[(r, loc * per + col)] = w[(c, col)];
                }
            }
            op
        })
        .collect();
    if rows.is_empty() {
        let means = query_ops
            .iter()
            .map(|op| DVector::zeros(op.nrows()))
            .collect();
        let covs = query_ops.iter().map(|op| op * k * op.transpose()).collect();
        return Ok(DensePosterior {
            means,
            covs,
            log_marginal: 0.0,
        });
    }
    let h = DMatrix::from_fn(rows.len(), total, |r, c| rows[r][c]);
    let y = DVector::from_vec(targets);
    let hk = &h * k;
    let mut s = &hk * h.transpose();
    for (i, v) in noise_diag.iter().enumerate() {
        s[(i, i)] += v;
    }
    symmetrize(&mut s);
    let chol: Cholesky<f64, nalgebra::Dyn> = robust_cholesky(&s, DEFAULT_JITTER)
        .ok_or_else(|| Error::SingularGram("dense observation covariance".into()))?;
    let alpha = chol.solve(&y);
    let log_marginal =
        -0.5 * y.dot(&alpha) - 0.5 * log_det_from_cholesky(&chol) - 0.5 * y.len() as f64 * LN_2PI;
    let mut means = Vec::with_capacity(queries.len());
    let mut covs = Vec::with_capacity(queries.len());
    for op in &query_ops {
        let cross = &hk * op.transpose();
        means.push(cross.transpose() * &alpha);
        let mut c = op * k * op.transpose() - cross.transpose() * chol.solve(&cross);
        symmetrize(&mut c);
        covs.push(c);
    }
    Ok(DensePosterior {
        means,
        covs,
        log_marginal,
    })
}

/// Monte Carlo estimate of an expected log-likelihood and its gradients
/// with respect to the input mean and covariance.
#[derive(Debug, Clone)]
pub struct McEstimate {
    pub ell: f64,
    pub ell_se: f64,
    pub g_mean: DVector<f64>,
    pub g_mean_se: DVector<f64>,
    pub g_cov: DMatrix<f64>,
    pub g_cov_se: DMatrix<f64>,
}

/// Minimum sample count accepted by [`mc_expectation`].
pub const MIN_MC_SAMPLES: usize = 10_000;

/// Estimates `E[log p]`, `dE/dμ = E[∇ log p]` and `dE/dΣ = ½ E[∇² log p]`
/// under `N(mean, cov)`.
pub fn mc_expectation(
    lik: &Likelihood,
    noise: &[f64],
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if n_samples < MIN_MC_SAMPLES {
        return Err(Error::InvalidModel(format!(
            "Monte Carlo estimate needs at least {MIN_MC_SAMPLES} samples"
        )));
    }
    let m = mean.len();
    let eig = SymmetricEigen::new(cov.clone());
    let mut root = eig.eigenvectors.clone();
    for c in 0..m {
        let s = eig.eigenvalues[c].max(0.0).sqrt();
        for r in 0..m {
            root[(r, c)] *= s;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    let mut gm = DVector::zeros(m);
    let mut gm2 = DVector::zeros(m);
    let mut gc = DMatrix::zeros(m, m);
    let mut gc2 = DMatrix::zeros(m, m);
    let mut xi = DVector::zeros(m);
    for _ in 0..n_samples {
        for v in xi.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let z = mean + &root * &xi;
        let e = log_lik(lik, &z, noise)?;
        sum += e.value;
        sum2 += e.value * e.value;
        gm += &e.gradient;
        gm2 += e.gradient.component_mul(&e.gradient);
        let h = e.hessian * 0.5;
        gc2 += h.component_mul(&h);
        gc += h;
    }
    let n = n_samples as f64;
    let se = |s: f64, s2: f64| ((s2 / n - (s / n).powi(2)).max(0.0) / (n - 1.0)).sqrt();
    Ok(McEstimate {
        ell: sum / n,
        ell_se: se(sum, sum2),
        g_mean_se: DVector::from_fn(m, |i, _| se(gm[i], gm2[i])),
        g_mean: gm / n,
        g_cov_se: DMatrix::from_fn(m, m, |i, j| se(gc[(i, j)], gc2[(i, j)])),
        g_cov: gc / n,
    })
}

/// A randomly drawn conjugate model with its terms and all term locations.
#[derive(Debug, Clone)]
pub struct ConjugateInstance {
    pub latents: Vec<LatentPrior>,
    pub spec: GenerativeSpec,
    pub terms: Vec<Term>,
    pub locations: Vec<(f64, Vec<f64>)>,
}

/// Draws a conjugate problem: 1–2 latents, random mixing, Gaussian data,
/// one two-point boundary term and linear collocation, at most 24 scalar
/// observations in total.
pub fn random_conjugate_instance(seed: u64) -> Result<ConjugateInstance> {
    use crate::kernels::{KernelFamily, KernelSpec};
    use crate::physics::{LinearResidual, NoiseConfig, TermKind};
    use crate::stprior::DerivativeOrders;
    use rand::Rng;
    use std::sync::Arc;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = rng.random_range(1..=2usize);
    let d_t = rng.random_range(1..=2usize);
    let d_s = rng.random_range(1..=2usize);
    let orders = DerivativeOrders::new(d_t, d_s)?;
    let families = [KernelFamily::Matern32, KernelFamily::Matern52, KernelFamily::Matern72];
    let latents: Vec<LatentPrior> = (0..q)
        .map(|_| -> Result<LatentPrior> {
            let fam = families[rng.random_range(0..families.len())];
            let temporal = KernelSpec::new(fam, rng.random_range(0.5..2.0), rng.random_range(0.5..2.0))?;
            let spatial = KernelSpec::new(KernelFamily::SquaredExponential, rng.random_range(0.5..1.5), 1.0)?;
            Ok(LatentPrior {
                temporal,
                spatial: SpatialKernel::new(vec![spatial]),
            })
        })
        .collect::<Result<_>>()?;
    let out = 2;
    let qd = q * orders.total();
    let mixing = DMatrix::from_fn(out, qd, |_, _| rng.random_range(-1.0..1.0));
    let noise = NoiseConfig {
        observation: vec![rng.random_range(0.02..0.2)],
        collocation: rng.random_range(0.01..0.1),
        boundary: rng.random_range(0.01..0.1),
    };
    let g = DMatrix::from_fn(1, 2, |_, _| rng.random_range(-1.0..1.0));
    let residual = Arc::new(LinearResidual {
        name: "random_linear".into(),
        matrix: g,
    });
    let spec = GenerativeSpec {
        latents: q,
        orders,
        mixing,
        residual: Some(residual),
        residual_inputs: vec![0, 1],
        obs_outputs: vec![0],
        probit_input: None,
        probit_scale: crate::physics::DEFAULT_PROBIT_SCALE,
        noise,
    };
    let n_t = rng.random_range(2..=4usize);
    let n_s = rng.random_range(2..=3usize);
    let mut times: Vec<f64> = (0..n_t).map(|i| i as f64 * 0.4 + rng.random_range(0.0..0.3)).collect();
    times.sort_by(|a, b| a.total_cmp(b));
    let points: Vec<Vec<f64>> = (0..n_s).map(|i| vec![i as f64 * 0.7 + rng.random_range(0.0..0.4)]).collect();
    let mut terms = Vec::new();
    let mut locations = Vec::new();
    let budget = 23;
    for &t in &times {
        for p in &points {
            locations.push((t, p.clone()));
            if terms.len() < budget && rng.random_bool(0.7) {
                terms.push(Term {
                    time: t,
                    points: vec![p.clone()],
                    select: crate::physics::selector(&[0], out)?,
                    lik: Likelihood::Gaussian {
                        y: DVector::from_element(1, rng.random_range(-1.5..1.5)),
                        noise: vec![0],
                    },
                    kind: TermKind::Observation,
                    batchable: true,
                });
            }
            if terms.len() < budget && rng.random_bool(0.4) {
                terms.extend(spec.collocation_terms(&[t], std::slice::from_ref(p))?);
            }
        }
    }
    let tb = times[rng.random_range(0..n_t)];
    terms.push(spec.boundary_term(
        tb,
        &[(points[0].clone(), 0, 1.0), (points[n_s - 1].clone(), 1, -1.0)],
        rng.random_range(-0.5..0.5),
    )?);
    Ok(ConjugateInstance {
        latents,
        spec,
        terms,
        locations,
    })
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{KernelFamily, KernelSpec};
    use crate::physics::{residual_latent_force, NoiseConfig, TermKind};
    use crate::stprior::DerivativeOrders;

    fn series_spec() -> (Vec<LatentPrior>, GenerativeSpec) {
        let latents = vec![LatentPrior {
            temporal: KernelSpec::new(KernelFamily::Matern52, 0.7, 1.3).unwrap(),
            spatial: SpatialKernel::none(),
        }];
        let orders = DerivativeOrders::new(1, 1).unwrap();
        let noise = NoiseConfig {
            observation: vec![0.1],
            collocation: 1e-4,
            boundary: 1e-4,
        };
        (latents, GenerativeSpec::identity(1, orders, vec![0], noise))
    }

    fn obs(t: f64, y: f64) -> Term {
        Term {
            time: t,
            points: vec![vec![]],
            select: DMatrix::from_element(1, 1, 1.0),
            lik: Likelihood::Gaussian {
                y: DVector::from_element(1, y),
                noise: vec![0],
            },
            kind: TermKind::Observation,
            batchable: true,
        }
    }

    fn query(t: f64) -> DenseQuery {
        DenseQuery {
            time: t,
            point: vec![],
            components: vec![0],
        }
    }

    #[test]
    fn no_observations_gives_prior() {
        let (latents, spec) = series_spec();
        let post =
            dense_posterior(&latents, &spec, &[0.1, 1e-4, 1e-4], &[], &[query(0.3)]).unwrap();
        assert_eq!(post.means[0][0], 0.0);
        assert!((post.covs[0][(0, 0)] - 1.3).abs() < 1e-14);
    }

    #[test]
    fn exact_observation_is_interpolated() {
        let (latents, spec) = series_spec();
        let post = dense_posterior(
            &latents,
            &spec,
            &[1e-12, 1e-4, 1e-4],
            &[obs(0.5, 2.0)],
            &[query(0.5)],
        )
        .unwrap();
        assert!((post.means[0][0] - 2.0).abs() < 1e-9);
        assert!(post.covs[0][(0, 0)].abs() < 1e-9);
    }

    #[test]
    fn size_guard() {
        let (latents, spec) = series_spec();
        let terms: Vec<Term> = (0..2001).map(|i| obs(i as f64, 0.0)).collect();
        assert!(matches!(
            dense_posterior(&latents, &spec, &[0.1, 1e-4, 1e-4], &terms, &[]),
            Err(Error::OracleTooLarge(2001))
        ));
    }

    #[test]
    fn monte_carlo_matches_linear_residual() {
        let lik = Likelihood::Residual {
            residual: residual_latent_force(),
            noise: 0,
        };
        let mean = DVector::from_vec(vec![0.3, -0.2]);
        let cov = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.2]);
        let s2 = 0.3;
        let est = mc_expectation(&lik, &[s2], &mean, &cov, 200_000, 7).unwrap();
        // Residual is a + b with unit noise scale s2.
        let m = mean[0] + mean[1];
        let v = 0.5 + 0.2 + 2.0 * 0.1;
        let exact = -0.5 * (LN_2PI + s2.ln()) - 0.5 * (m * m + v) / s2;
        assert!((est.ell - exact).abs() < 3.0 * est.ell_se);
        let again = mc_expectation(&lik, &[s2], &mean, &cov, 10_000, 7).unwrap();
        let again2 = mc_expectation(&lik, &[s2], &mean, &cov, 10_000, 7).unwrap();
        assert_eq!(again.ell, again2.ell);
        for i in 0..2 {
            assert!((est.g_mean[i] + m / s2).abs() < 3.0 * est.g_mean_se[i] + 1e-12);
        }
    }
}
