//! Variational inference: natural-gradient site updates realised through
//! Kalman smoothing, the evidence lower bound, the extended-Kalman solver,
//! hyperparameter optimisation and prediction.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, IWP_INITIAL_VARIANCE};
use crate::linalg::{clip_eigenvalues, min_eigenvalue, symmetrize, DEFAULT_JITTER};
use crate::physics::{log_phi_and_mills, selector, GenerativeSpec, Likelihood, Term, TermKind};
use crate::quadrature::{TensorRule, DEFAULT_ORDER};
use crate::ssm::{
    ek_update, filter_with, linear_update, rts_smooth, DiscreteStateModel, GaussianBelief,
    SmoothingResult,
};
use crate::stprior::{
    assemble_prior, check_distinct, LatentPrior, PriorOptions, SpatialCache, SpatialConditional,
    StPrior,
};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Inference scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// State over every distinct data/collocation location.
    Full,
    /// State over inducing locations carrying all spatial derivatives.
    Sparse,
    /// State over inducing locations carrying function values only.
    Structured,
    /// Single extended-Kalman pass.
    Eks,
}

/// Curvature used for the precision part of site updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Curvature {
    GaussNewton,
    Exact,
    /// Exact curvature with negative eigen-directions of site precisions removed.
    ExactClipped,
}

/// Lower bounds applied to noise variances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseFloors {
    pub observation: f64,
    pub collocation: f64,
    pub boundary: f64,
}

impl Default for NoiseFloors {
    fn default() -> Self {
        NoiseFloors {
            observation: 1e-10,
            collocation: 1e-6,
            boundary: 1e-6,
        }
    }
}

/// Everything that defines the probabilistic model apart from data.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub latents: Vec<LatentPrior>,
    pub generative: GenerativeSpec,
    pub mode: Mode,
    /// Spatial nodes of the state; `None` uses every distinct term location.
    pub nodes: Option<Vec<Vec<f64>>>,
    pub iwp_initial_variance: f64,
    pub jitter: f64,
    pub mean_field: bool,
    pub curvature: Curvature,
    pub quadrature_order: usize,
    pub floors: NoiseFloors,
}

impl ModelSpec {
    pub fn new(latents: Vec<LatentPrior>, generative: GenerativeSpec, mode: Mode) -> Self {
        ModelSpec {
            latents,
            generative,
            mode,
            nodes: None,
            iwp_initial_variance: IWP_INITIAL_VARIANCE,
            jitter: DEFAULT_JITTER,
            mean_field: false,
            curvature: Curvature::GaussNewton,
            quadrature_order: DEFAULT_ORDER,
            floors: NoiseFloors::default(),
        }
    }

    fn node_orders(&self) -> usize {
        match self.mode {
            Mode::Structured => 1,
            _ => self.generative.orders.d_s,
        }
    }
}

/// Log-space hyperparameter vector with stable names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub names: Vec<String>,
    pub log_values: Vec<f64>,
    pub floors: Vec<f64>,
}

impl Hyperparameters {
    pub fn from_spec(spec: &ModelSpec) -> Self {
        let mut names = Vec::new();
        let mut values = Vec::new();
        let mut floors = Vec::new();
        let mut push = |n: String, v: f64, floor: f64| {
            names.push(n);
            values.push(v.max(floor).ln());
            floors.push(floor);
        };
        for (q, lp) in spec.latents.iter().enumerate() {
            if !matches!(lp.temporal.family, KernelFamily::IntegratedWiener { .. }) {
                push(
                    format!("latent{q}.temporal.lengthscale"),
                    lp.temporal.lengthscale,
                    0.0,
                );
            }
            push(
                format!("latent{q}.temporal.variance"),
                lp.temporal.variance,
                0.0,
            );
            for (j, f) in lp.spatial.factors.iter().enumerate() {
                push(
                    format!("latent{q}.spatial{j}.lengthscale"),
                    f.lengthscale,
                    0.0,
                );
            }
        }
        let noise = &spec.generative.noise;
        for (name, v) in noise.names().into_iter().zip(noise.as_table()) {
            let floor = if name == "noise.collocation" {
                spec.floors.collocation
            } else if name == "noise.boundary" {
                spec.floors.boundary
            } else {
                spec.floors.observation
            };
            push(name, v, floor);
        }
        Hyperparameters {
            names,
            log_values: values,
            floors,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn value(&self, i: usize) -> f64 {
        self.log_values[i].exp().max(self.floors[i])
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.value(i))
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let i = self
            .index(name)
            .ok_or_else(|| Error::InvalidModel(format!("unknown hyperparameter '{name}'")))?;
        if !(value > 0.0) {
            return Err(Error::InvalidHyperparameter(format!("{name} = {value}")));
        }
        self.log_values[i] = value.max(self.floors[i]).ln();
        Ok(())
    }

    /// Kernel specs and noise table for these values.
    pub fn apply(&self, spec: &ModelSpec) -> Result<(Vec<LatentPrior>, Vec<f64>)> {
        let mut latents = spec.latents.clone();
        for (q, lp) in latents.iter_mut().enumerate() {
            if let Some(v) = self.get(&format!("latent{q}.temporal.lengthscale")) {
                lp.temporal.lengthscale = v;
            }
            if let Some(v) = self.get(&format!("latent{q}.temporal.variance")) {
                lp.temporal.variance = v;
            }
            for (j, f) in lp.spatial.factors.iter_mut().enumerate() {
                if let Some(v) = self.get(&format!("latent{q}.spatial{j}.lengthscale")) {
                    f.lengthscale = v;
                }
            }
        }
        let names = spec.generative.noise.names();
        let mut noise = Vec::with_capacity(names.len());
        for n in &names {
            noise.push(
                self.get(n)
                    .ok_or_else(|| Error::InvalidModel(format!("missing hyperparameter {n}")))?,
            );
        }
        Ok((latents, noise))
    }

    pub fn is_noise(&self, i: usize) -> bool {
        self.names[i].starts_with("noise.")
    }
}

/// A model together with its likelihood terms on a fixed time grid.
#[derive(Debug)]
pub struct Problem {
    pub spec: ModelSpec,
    /// Terms sorted by time.
    pub terms: Vec<Term>,
    pub times: Vec<f64>,
    pub nodes: Vec<Vec<f64>>,
    pub cache: SpatialCache,
}

fn point_key(points: &[Vec<f64>]) -> Vec<u64> {
    let mut k = Vec::new();
    for p in points {
        k.push(p.len() as u64);
        k.extend(p.iter().map(|v| v.to_bits()));
    }
    k
}

/// Sorted union of time values (bitwise de-duplicated).
pub fn time_union(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = a.iter().chain(b.iter()).cloned().collect();
    all.sort_by(|x, y| x.total_cmp(y));
    all.dedup_by(|x, y| x.to_bits() == y.to_bits());
    all
}

impl Problem {
    /// `extra_times` are added to the grid (for example to predict later
    /// without re-gridding); terms may sit at any time.
    pub fn new(spec: ModelSpec, mut terms: Vec<Term>, extra_times: &[f64]) -> Result<Self> {
        spec.generative.validate()?;
        if spec.latents.len() != spec.generative.latents {
            return Err(Error::InvalidModel(format!(
                "{} latent priors for {} latents",
                spec.latents.len(),
                spec.generative.latents
            )));
        }
        for t in &terms {
            if !t.time.is_finite() {
                return Err(Error::InvalidModel("non-finite term time".into()));
            }
            if t.select.ncols() != t.points.len() * spec.generative.out_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "term select has {} columns for {} points of {} outputs",
                    t.select.ncols(),
                    t.points.len(),
                    spec.generative.out_dim()
                )));
            }
            if t.select.nrows() != t.lik.input_dim() {
                return Err(Error::ShapeMismatch(
                    "term select rows differ from likelihood inputs".into(),
                ));
            }
        }
        terms.sort_by(|a, b| a.time.total_cmp(&b.time));
        let term_times: Vec<f64> = terms.iter().map(|t| t.time).collect();
        let times = time_union(&term_times, extra_times);
        if times.is_empty() {
            return Err(Error::InvalidModel("problem has no time points".into()));
        }
        let nodes = match (&spec.nodes, spec.mode) {
            (Some(n), _) => n.clone(),
            (None, Mode::Sparse) | (None, Mode::Structured) => {
                return Err(Error::InvalidModel(
                    "sparse and structured modes need inducing nodes".into(),
                ))
            }
            (None, _) => {
                let mut pts: Vec<Vec<f64>> = Vec::new();
                let mut seen = std::collections::HashSet::new();
                for t in &terms {
                    for p in &t.points {
                        if seen.insert(point_key(std::slice::from_ref(p))) {
                            pts.push(p.clone());
                        }
                    }
                }
                if pts.is_empty() {
                    let dims = spec.latents[0].spatial.dims();
                    pts.push(vec![0.0; dims]);
                }
                pts.sort_by(|a, b| {
                    a.iter()
                        .zip(b.iter())
                        .map(|(x, y)| x.total_cmp(y))
                        .find(|o| o.is_ne())
                        .unwrap_or(std::cmp::Ordering::Equal)
                });
                pts
            }
        };
        check_distinct(&nodes)?;
        Ok(Problem {
            spec,
            terms,
            times,
            nodes,
            cache: SpatialCache::new(),
        })
    }

    pub fn is_conjugate(&self) -> bool {
        self.terms.iter().all(|t| match &t.lik {
            Likelihood::Gaussian { .. } => true,
            Likelihood::Residual { residual, .. } => residual.is_linear(),
            Likelihood::Probit { .. } => false,
        })
    }

    pub fn initial_state(&self, seed: u64) -> Result<VariationalState> {
        let hyper = Hyperparameters::from_spec(&self.spec);
        let prior = self.build_prior(&hyper)?;
        let m = prior.site_dim();
        Ok(VariationalState {
            sites: vec![SiteParams::zeros(m); self.times.len()],
            times: self.times.clone(),
            hyper,
            mode: self.spec.mode,
            beta: if self.is_conjugate() { 1.0 } else { 0.1 },
            rng_seed: seed,
            epoch: 0,
        })
    }

    fn build_prior(&self, hyper: &Hyperparameters) -> Result<StPrior> {
        let (latents, _) = hyper.apply(&self.spec)?;
        let options = PriorOptions {
            node_orders: self.spec.node_orders(),
            iwp_initial_variance: self.spec.iwp_initial_variance,
            jitter: self.spec.jitter,
        };
        assemble_prior(
            latents,
            self.spec.generative.orders,
            self.nodes.clone(),
            options,
            Some(&self.cache),
        )
    }

    /// Compiles the model for `hyper` on the problem's own time grid.
    pub fn compile(&self, hyper: &Hyperparameters) -> Result<Compiled> {
        self.compile_on(hyper, &self.times)
    }

    /// Compiles on a refined grid containing every problem time.
    pub fn compile_on(&self, hyper: &Hyperparameters, times: &[f64]) -> Result<Compiled> {
        let (_, noise) = hyper.apply(&self.spec)?;
        let prior = self.build_prior(hyper)?;
        let model = prior.discrete_model(times)?;
        let emission = Arc::new(prior.site_emission());
        let site_to_state: Vec<usize> = (0..prior.site_dim())
            .map(|r| {
                (0..prior.state_dim())
                    .find(|&c| emission[(r, c)] == 1.0)
                    .unwrap_or(0)
            })
            .collect();
        let temporal = prior.temporal_marginals(times);
        let mut builder = TermBuilder {
            prior: &prior,
            spec: &self.spec.generative,
            temporal: &temporal,
            conds: HashMap::new(),
        };
        let mut compiled_terms = Vec::with_capacity(self.terms.len());
        let mut ranges = vec![0..0; times.len()];
        let mut k = 0;
        for (i, t) in self.terms.iter().enumerate() {
            while k < times.len() && times[k].to_bits() != t.time.to_bits() {
                k += 1;
            }
            if k == times.len() {
                return Err(Error::ShapeMismatch(format!(
                    "term time {} missing from grid",
                    t.time
                )));
            }
            if ranges[k].is_empty() {
                ranges[k] = i..i + 1;
            } else {
                ranges[k].end = i + 1;
            }
            compiled_terms.push(builder.build(k, &t.points, &t.select)?);
        }
        Ok(Compiled {
            prior,
            model,
            emission,
            site_to_state,
            times: times.to_vec(),
            terms: compiled_terms,
            term_ranges: ranges,
            noise,
            temporal,
        })
    }
}

/// Linear map from the site vector at one time to a term's inputs.
#[derive(Debug, Clone)]
pub struct CompiledTerm {
    pub time_index: usize,
    /// Site components the term depends on.
    pub cols: Vec<usize>,
    /// `inputs × cols.len()`.
    pub map: DMatrix<f64>,
    /// Covariance contributed by the spatial conditional, if any.
    pub extra: Option<DMatrix<f64>>,
}

struct TermBuilder<'a> {
    prior: &'a StPrior,
    spec: &'a GenerativeSpec,
    temporal: &'a [Vec<DMatrix<f64>>],
    conds: HashMap<Vec<u64>, Arc<Vec<SpatialConditional>>>,
}

impl TermBuilder<'_> {
    fn conditionals(&mut self, points: &[Vec<f64>]) -> Result<Arc<Vec<SpatialConditional>>> {
        let key = point_key(points);
        if let Some(c) = self.conds.get(&key) {
            return Ok(c.clone());
        }
        let list: Vec<SpatialConditional> = (0..self.prior.num_latents())
            .map(|q| self.prior.conditional(q, points))
            .collect::<Result<_>>()?;
        let arc = Arc::new(list);
        self.conds.insert(key, arc.clone());
        Ok(arc)
    }

    fn build(
        &mut self,
        time_index: usize,
        points: &[Vec<f64>],
        select: &DMatrix<f64>,
    ) -> Result<CompiledTerm> {
        let prior = self.prior;
        let orders = prior.orders;
        let (d_t, d_s) = (orders.d_t, orders.d_s);
        let dd = orders.total();
        let nq = prior.num_latents();
        let qd = nq * dd;
        let s = prior.node_orders;
        let m = prior.num_nodes();
        let l_count = points.len();
        let conds = self.conditionals(points)?;

        // Latent derivative map: rows (l, q, j, i), columns over the site vector.
        let mut rows_f: Vec<Vec<(usize, f64)>> = vec![Vec::new(); l_count * qd];
        for (q, cond) in conds.iter().enumerate() {
            for l in 0..l_count {
                for i in 0..d_s {
                    let prow = cond.projector.row(l * d_s + i);
                    for n in 0..m {
                        for ip in 0..s {
                            let v = prow[n * s + ip];
                            if v == 0.0 {
                                continue;
                            }
                            for j in 0..d_t {
                                rows_f[l * qd + q * dd + j * d_s + i]
                                    .push((prior.site_index(q, j, n, ip), v));
                            }
                        }
                    }
                }
            }
        }
        let mut cols: Vec<usize> = rows_f.iter().flatten().map(|(c, _)| *c).collect();
        cols.sort_unstable();
        cols.dedup();
        let col_pos: HashMap<usize, usize> =
            cols.iter().enumerate().map(|(p, c)| (*c, p)).collect();
        let mut mf = DMatrix::zeros(l_count * qd, cols.len());
        for (r, entries) in rows_f.iter().enumerate() {
            for (c, v) in entries {
                mf[(r, col_pos[c])] += v;
            }
        }
        // Stacked mixing (I_L ⊗ W) followed by the term selector.
        let w = &self.spec.mixing;
        let out = w.nrows();
        let mut mix = DMatrix::zeros(l_count * out, l_count * qd);
        for l in 0..l_count {
            mix.view_mut((l * out, l * qd), (out, qd)).copy_from(w);
        }
        let sm = select * &mix;
        let map = &sm * &mf;

        let has_residual = conds.iter().any(|c| c.residual.iter().any(|v| *v != 0.0));
        let extra = if has_residual {
            let mut sf = DMatrix::zeros(l_count * qd, l_count * qd);
            for (q, cond) in conds.iter().enumerate() {
                let t = &self.temporal[time_index][q];
                for l in 0..l_count {
                    for lp in 0..l_count {
                        for j in 0..d_t {
                            for jp in 0..d_t {
                                for i in 0..d_s {
                                    for ip in 0..d_s {
                                        sf[(
                                            l * qd + q * dd + j * d_s + i,
                                            lp * qd + q * dd + jp * d_s + ip,
                                        )] = t[(j, jp)]
                                            * cond.residual[(l * d_s + i, lp * d_s + ip)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let mut e = &sm * sf * sm.transpose();
            symmetrize(&mut e);
            Some(e)
        } else {
            None
        };
        Ok(CompiledTerm {
            time_index,
            cols,
            map,
            extra,
        })
    }
}

/// A model compiled for one hyperparameter setting on one time grid.
pub struct Compiled {
    pub prior: StPrior,
    pub model: DiscreteStateModel,
    pub emission: Arc<DMatrix<f64>>,
    pub site_to_state: Vec<usize>,
    pub times: Vec<f64>,
    pub terms: Vec<CompiledTerm>,
    /// Terms at each time index.
    pub term_ranges: Vec<Range<usize>>,
    pub noise: Vec<f64>,
    temporal: Vec<Vec<DMatrix<f64>>>,
}

impl Compiled {
    /// Marginal of the site vector from a state marginal.
    pub fn site_marginal(&self, belief: &GaussianBelief) -> (DVector<f64>, DMatrix<f64>) {
        let idx = &self.site_to_state;
        let n = idx.len();
        let mean = DVector::from_iterator(n, idx.iter().map(|&i| belief.mean[i]));
        let cov = DMatrix::from_fn(n, n, |r, c| belief.cov[(idx[r], idx[c])]);
        (mean, cov)
    }

    /// Compiles a query term (outputs `components` of `F` at `points`) at time index `k`.
    pub fn query_term(
        &self,
        spec: &GenerativeSpec,
        k: usize,
        points: &[Vec<f64>],
        components: &[usize],
    ) -> Result<CompiledTerm> {
        let out = spec.out_dim();
        let mut idx = Vec::new();
        for l in 0..points.len() {
            for &c in components {
                idx.push(l * out + c);
            }
        }
        let select = selector(&idx, points.len() * out)?;
        let mut b = TermBuilder {
            prior: &self.prior,
            spec,
            temporal: &self.temporal,
            conds: HashMap::new(),
        };
        b.build(k, points, &select)
    }
}

/// Natural parameters of one surrogate site (precision and shift).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteParams {
    pub precision: DMatrix<f64>,
    pub shift: DVector<f64>,
}

impl SiteParams {
    pub fn zeros(m: usize) -> Self {
        SiteParams {
            precision: DMatrix::zeros(m, m),
            shift: DVector::zeros(m),
        }
    }
}

/// Site parameters, hyperparameters and schedule state; enough to resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub sites: Vec<SiteParams>,
    pub times: Vec<f64>,
    pub hyper: Hyperparameters,
    pub mode: Mode,
    pub beta: f64,
    pub rng_seed: u64,
    pub epoch: usize,
}

/// Whitened form of a site: `y = H z + e`, `e ~ N(0, I)`.
#[derive(Debug, Clone)]
struct WhitenedSite {
    h: DMatrix<f64>,
    y: DVector<f64>,
    half_log: f64,
}

fn whiten(site: &SiteParams) -> WhitenedSite {
    let m = site.shift.len();
    let mut prec = site.precision.clone();
    symmetrize(&mut prec);
    let max_abs = prec.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if max_abs == 0.0 {
        return WhitenedSite {
            h: DMatrix::zeros(0, m),
            y: DVector::zeros(0),
            half_log: 0.0,
        };
    }
    let eig = SymmetricEigen::new(prec);
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let keep: Vec<usize> = (0..m)
        .filter(|&i| eig.eigenvalues[i] > 1e-14 * max_eig)
        .collect();
    let mut h = DMatrix::zeros(keep.len(), m);
    let mut y = DVector::zeros(keep.len());
    let mut half_log = 0.0;
    for (r, &i) in keep.iter().enumerate() {
        let s = eig.eigenvalues[i];
        let sq = s.sqrt();
        let u = eig.eigenvectors.column(i);
        for j in 0..m {
            h[(r, j)] = sq * u[j];
        }
        y[r] = u.dot(&site.shift) / sq;
        half_log += 0.5 * s.ln();
    }
    WhitenedSite { h, y, half_log }
}

/// Whitened sites lifted to the state, reusable across hyperparameter probes.
pub struct PreparedSites {
    sites: Vec<WhitenedSite>,
    state_rows: Vec<DMatrix<f64>>,
}

impl PreparedSites {
    pub fn new(compiled: &Compiled, sites: &[SiteParams]) -> Result<Self> {
        if sites.len() != compiled.times.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} sites for {} time steps",
                sites.len(),
                compiled.times.len()
            )));
        }
        let ws: Vec<WhitenedSite> = sites.iter().map(whiten).collect();
        let state_rows = ws
            .iter()
            .map(|w| &w.h * compiled.emission.as_ref())
            .collect();
        Ok(PreparedSites {
            sites: ws,
            state_rows,
        })
    }
}

/// Filter and smoother over the surrogate sites.
pub fn smooth_sites(compiled: &Compiled, prepared: &PreparedSites) -> Result<SmoothingResult> {
    let filt = filter_with(&compiled.model, |k, belief| {
        let w = &prepared.sites[k];
        if w.y.is_empty() {
            return Ok((belief, 0.0));
        }
        let r = DMatrix::identity(w.y.len(), w.y.len());
        let (b, ll) = linear_update(&belief, &prepared.state_rows[k], &w.y, &r, k)?;
        Ok((b, ll + w.half_log))
    })?;
    rts_smooth(&compiled.model, &filt)
}

/// Expected log-likelihood of one term and its gradients with respect to the
/// mean and covariance of the term inputs.
#[derive(Debug, Clone)]
pub struct TermExpectation {
    pub ell: f64,
    pub g_mean: DVector<f64>,
    pub g_cov: DMatrix<f64>,
}

/// Gauss–Hermite rules by dimension.
pub struct Rules {
    order: usize,
    rules: Vec<Option<TensorRule>>,
}

impl Rules {
    pub fn new(order: usize) -> Self {
        Rules {
            order,
            rules: vec![None, None, None, None],
        }
    }

    fn get(&mut self, dims: usize) -> Result<&TensorRule> {
        if dims >= self.rules.len() {
            return Err(Error::QuadratureOverflow {
                dims,
                order: self.order,
            });
        }
        if self.rules[dims].is_none() {
            self.rules[dims] = Some(TensorRule::new(dims, self.order)?);
        }
        Ok(self.rules[dims].as_ref().unwrap())
    }
}

/// Square root `L Lᵀ = Σ` robust to singular `Σ`.
fn sqrt_psd(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let n = sigma.nrows();
    let eig = SymmetricEigen::new(crate::linalg::symmetrized(sigma.clone()));
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        let s = eig.eigenvalues[i].max(0.0).sqrt();
        for r in 0..n {
            l[(r, i)] = eig.eigenvectors[(r, i)] * s;
        }
    }
    l
}

/// Pseudo-inverse of a small symmetric PSD matrix.
fn pinv_psd(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let n = sigma.nrows();
    let eig = SymmetricEigen::new(crate::linalg::symmetrized(sigma.clone()));
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        let s = eig.eigenvalues[i];
        if s > 1e-12 * max_eig && s > 0.0 {
            let u = eig.eigenvectors.column(i);
            out += (u * u.transpose()) / s;
        }
    }
    out
}

/// Expectation of a term's log-likelihood under `N(mean, cov)` where
/// `cov = cov_u + extra` and `cov_u` is the part explained by the state.
pub fn expect_term(
    lik: &Likelihood,
    mean: &DVector<f64>,
    cov_u: &DMatrix<f64>,
    cov: &DMatrix<f64>,
    noise: &[f64],
    curvature: Curvature,
    rules: &mut Rules,
) -> Result<TermExpectation> {
    let m = mean.len();
    let out = match lik {
        Likelihood::Gaussian { y, noise: idx } => {
            let mut ell = 0.0;
            let mut g_mean = DVector::zeros(m);
            let mut g_cov = DMatrix::zeros(m, m);
            for r in 0..m {
                let s2 = noise[idx[r]];
                let e = y[r] - mean[r];
                ell += -0.5 * (LN_2PI + s2.ln()) - 0.5 * (e * e + cov[(r, r)]) / s2;
                g_mean[r] = e / s2;
                g_cov[(r, r)] = -0.5 / s2;
            }
            TermExpectation { ell, g_mean, g_cov }
        }
        Likelihood::Residual {
            residual,
            noise: idx,
        } => {
            let s2 = noise[*idx];
            let nr = residual.outputs();
            let base = -0.5 * nr as f64 * (LN_2PI + s2.ln());
            if let Some(g) = residual.linear_matrix() {
                let gm = &g * mean;
                let gsg = &g * cov * g.transpose();
                let ell = base - 0.5 * (gm.norm_squared() + gsg.trace()) / s2;
                let gtg = g.transpose() * &g;
                TermExpectation {
                    ell,
                    g_mean: -(&gtg * mean) / s2,
                    g_cov: gtg * (-0.5 / s2),
                }
            } else {
                let active = residual.nonlinear_inputs();
                let na = active.len();
                let rule = rules.get(na)?.clone();
                // Conditional structure given the nonlinear inputs z_A.
                let cond = |c: &DMatrix<f64>| -> (DMatrix<f64>, DMatrix<f64>) {
                    let s_aa = DMatrix::from_fn(na, na, |r, k| c[(active[r], active[k])]);
                    let s_xa = DMatrix::from_fn(m, na, |r, k| c[(r, active[k])]);
                    let l = sqrt_psd(&s_aa);
                    let b = &s_xa * pinv_psd(&s_aa) * &l;
                    let mut sc = c - &b * b.transpose();
                    symmetrize(&mut sc);
                    (b, sc)
                };
                let (b, sc) = cond(cov);
                let mut ell = 0.0;
                let mut g_mean = DVector::zeros(m);
                let mut g_cov = DMatrix::zeros(m, m);
                for (xi, w) in rule.nodes.iter().zip(&rule.weights) {
                    let zbar = mean + &b * xi;
                    let gv = residual.eval(&zbar);
                    let j = residual.jacobian(&zbar);
                    let jsj = &j * &sc * j.transpose();
                    ell += w * (base - 0.5 * (gv.norm_squared() + jsj.trace()) / s2);
                    g_mean -= (j.transpose() * &gv) * (w / s2);
                    if curvature != Curvature::GaussNewton {
                        let mut h = j.transpose() * &j;
                        for (r, hr) in residual.hessians(&zbar).iter().enumerate() {
                            h += hr * gv[r];
                        }
                        g_cov -= h * (0.5 * w / s2);
                    }
                }
                if curvature == Curvature::GaussNewton {
                    // Expectation over the state-driven part only, with the
                    // conditional spread collapsed onto its mean.
                    let (bu, _) = cond(cov_u);
                    for (xi, w) in rule.nodes.iter().zip(&rule.weights) {
                        let z = mean + &bu * xi;
                        let j = residual.jacobian(&z);
                        g_cov -= (j.transpose() * &j) * (0.5 * w / s2);
                    }
                }
                TermExpectation { ell, g_mean, g_cov }
            }
        }
        Likelihood::Probit { scale } => {
            let rule = rules.get(1)?.clone();
            let sd = cov[(0, 0)].max(0.0).sqrt();
            let mut ell = 0.0;
            let mut gm = 0.0;
            let mut gc = 0.0;
            for (xi, w) in rule.nodes.iter().zip(&rule.weights) {
                let z = (mean[0] + sd * xi[0]) / scale;
                let (lp, mills) = log_phi_and_mills(z)?;
                ell += w * lp;
                gm += w * mills / scale;
                gc += w * 0.5 * (-mills * (z + mills)) / (scale * scale);
            }
            TermExpectation {
                ell,
                g_mean: DVector::from_element(1, gm),
                g_cov: DMatrix::from_element(1, 1, gc),
            }
        }
    };
    if !out.ell.is_finite()
        || out.g_mean.iter().any(|v| !v.is_finite())
        || out.g_cov.iter().any(|v| !v.is_finite())
    {
        return Err(Error::NonFiniteLikelihood(format!(
            "expected log-likelihood of {lik:?}"
        )));
    }
    Ok(out)
}

/// Per-time ELL gradients in site coordinates.
#[derive(Debug, Clone)]
pub struct BlockGradient {
    pub ell: f64,
    /// dELL/dμ of the site vector.
    pub d_mean: DVector<f64>,
    /// dELL/dΣ of the site vector.
    pub d_cov: DMatrix<f64>,
}

/// Subset of terms at one time with their weights (1 unless mini-batched).
type Selection = Vec<(usize, f64)>;

fn term_moments(
    ct: &CompiledTerm,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let nc = ct.cols.len();
    let mu = DVector::from_iterator(nc, ct.cols.iter().map(|&c| mean[c]));
    let sub = DMatrix::from_fn(nc, nc, |r, c| cov[(ct.cols[r], ct.cols[c])]);
    let mz = &ct.map * mu;
    let mut su = &ct.map * sub * ct.map.transpose();
    symmetrize(&mut su);
    let sz = match &ct.extra {
        Some(e) => &su + e,
        None => su.clone(),
    };
    (mz, su, sz)
}

/// ELL and its site-space gradients at one time step.
fn block_gradient(
    problem: &Problem,
    compiled: &Compiled,
    selection: &Selection,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rules: &mut Rules,
    with_gradients: bool,
) -> Result<BlockGradient> {
    let n = mean.len();
    let mut out = BlockGradient {
        ell: 0.0,
        d_mean: DVector::zeros(if with_gradients { n } else { 0 }),
        d_cov: DMatrix::zeros(
            if with_gradients { n } else { 0 },
            if with_gradients { n } else { 0 },
        ),
    };
    for &(ti, weight) in selection {
        let ct = &compiled.terms[ti];
        let (mz, su, sz) = term_moments(ct, mean, cov);
        let e = expect_term(
            &problem.terms[ti].lik,
            &mz,
            &su,
            &sz,
            &compiled.noise,
            problem.spec.curvature,
            rules,
        )?;
        out.ell += weight * e.ell;
        if with_gradients {
            let gm = ct.map.transpose() * &e.g_mean;
            let gc = ct.map.transpose() * &e.g_cov * &ct.map;
            for (a, &ca) in ct.cols.iter().enumerate() {
                out.d_mean[ca] += weight * gm[a];
                for (b, &cb) in ct.cols.iter().enumerate() {
                    out.d_cov[(ca, cb)] += weight * gc[(a, b)];
                }
            }
        }
    }
    Ok(out)
}

fn full_selection(compiled: &Compiled, k: usize) -> Selection {
    compiled.term_ranges[k].clone().map(|i| (i, 1.0)).collect()
}

/// Mini-batch selection: per time, `batch` of the distinct batchable
/// locations uniformly without replacement, reweighted by `N / batch`.
fn batch_selection<R: Rng>(
    problem: &Problem,
    compiled: &Compiled,
    k: usize,
    batch: usize,
    rng: &mut R,
) -> Selection {
    let range = compiled.term_ranges[k].clone();
    let mut groups: Vec<Vec<u64>> = Vec::new();
    let mut group_of = Vec::with_capacity(range.len());
    for i in range.clone() {
        let t = &problem.terms[i];
        if !t.batchable {
            group_of.push(None);
            continue;
        }
        let key = point_key(&t.points);
        let g = match groups.iter().position(|k| *k == key) {
            Some(g) => g,
            None => {
                groups.push(key);
                groups.len() - 1
            }
        };
        group_of.push(Some(g));
    }
    let n = groups.len();
    let (chosen, scale) = if n == 0 || batch >= n {
        (vec![true; n], 1.0)
    } else {
        let mut c = vec![false; n];
        for g in sample(rng, n, batch).iter() {
            c[g] = true;
        }
        (c, n as f64 / batch as f64)
    };
    range
        .zip(group_of)
        .filter_map(|(i, g)| match g {
            None => Some((i, 1.0)),
            Some(g) if chosen[g] => Some((i, scale)),
            Some(_) => None,
        })
        .collect()
}

/// Expected log-likelihood and per-time gradients under smoothed marginals.
pub fn ell_gradients(
    problem: &Problem,
    compiled: &Compiled,
    smoothed: &SmoothingResult,
    with_gradients: bool,
) -> Result<Vec<BlockGradient>> {
    let mut rules = Rules::new(problem.spec.quadrature_order);
    (0..compiled.times.len())
        .map(|k| {
            let (mu, cov) = compiled.site_marginal(&smoothed.marginals[k]);
            block_gradient(
                problem,
                compiled,
                &full_selection(compiled, k),
                &mu,
                &cov,
                &mut rules,
                with_gradients,
            )
        })
        .collect()
}

/// Stochastic ELL estimate with spatial mini-batches of size `batch`.
pub fn minibatch_ell<R: Rng>(
    problem: &Problem,
    compiled: &Compiled,
    smoothed: &SmoothingResult,
    batch: usize,
    rng: &mut R,
    with_gradients: bool,
) -> Result<Vec<BlockGradient>> {
    if batch == 0 {
        return Err(Error::InvalidModel(
            "mini-batch size must be at least 1".into(),
        ));
    }
    let mut rules = Rules::new(problem.spec.quadrature_order);
    (0..compiled.times.len())
        .map(|k| {
            let (mu, cov) = compiled.site_marginal(&smoothed.marginals[k]);
            let sel = batch_selection(problem, compiled, k, batch, rng);
            block_gradient(
                problem,
                compiled,
                &sel,
                &mu,
                &cov,
                &mut rules,
                with_gradients,
            )
        })
        .collect()
}

/// Terms of the evidence lower bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub ell: f64,
    pub site_correction: f64,
    pub surrogate_log_marginal: f64,
    pub total: f64,
}

fn site_correction(
    compiled: &Compiled,
    prepared: &PreparedSites,
    smoothed: &SmoothingResult,
) -> f64 {
    let mut total = 0.0;
    for (k, w) in prepared.sites.iter().enumerate() {
        if w.y.is_empty() {
            continue;
        }
        let (mu, cov) = compiled.site_marginal(&smoothed.marginals[k]);
        let r = &w.y - &w.h * &mu;
        let tr = (&w.h * &cov * w.h.transpose()).trace();
        total += -0.5 * (r.norm_squared() + tr) - 0.5 * w.y.len() as f64 * LN_2PI + w.half_log;
    }
    total
}

fn elbo_from(
    problem: &Problem,
    compiled: &Compiled,
    prepared: &PreparedSites,
    smoothed: &SmoothingResult,
) -> Result<ElboReport> {
    let ell: f64 = ell_gradients(problem, compiled, smoothed, false)?
        .iter()
        .map(|b| b.ell)
        .sum();
    let corr = site_correction(compiled, prepared, smoothed);
    Ok(ElboReport {
        ell,
        site_correction: corr,
        surrogate_log_marginal: smoothed.log_marginal,
        total: ell - corr + smoothed.log_marginal,
    })
}

/// Evaluates the ELBO of `state` under its own hyperparameters.
pub fn elbo(problem: &Problem, state: &VariationalState) -> Result<ElboReport> {
    let compiled = problem.compile(&state.hyper)?;
    let prepared = PreparedSites::new(&compiled, &state.sites)?;
    let smoothed = smooth_sites(&compiled, &prepared)?;
    elbo_from(problem, &compiled, &prepared, &smoothed)
}

/// Current posterior for a state: compiled model, sites and smoother output.
pub struct Posterior {
    pub compiled: Compiled,
    pub prepared: PreparedSites,
    pub smoothed: SmoothingResult,
}

impl Posterior {
    pub fn new(problem: &Problem, state: &VariationalState) -> Result<Self> {
        let compiled = problem.compile(&state.hyper)?;
        let prepared = PreparedSites::new(&compiled, &state.sites)?;
        let smoothed = smooth_sites(&compiled, &prepared)?;
        Ok(Posterior {
            compiled,
            prepared,
            smoothed,
        })
    }

    pub fn elbo(&self, problem: &Problem) -> Result<ElboReport> {
        elbo_from(problem, &self.compiled, &self.prepared, &self.smoothed)
    }
}

/// Diagnostics from one natural-gradient step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NatgradInfo {
    pub ell: f64,
    /// Site precision blocks that failed the PSD check.
    pub psd_failures: usize,
}

/// One CVI step: site refresh from ELL gradients at the current posterior,
/// blended with step `beta`, followed by filtering and smoothing.
pub fn natgrad_step(
    problem: &Problem,
    state: &mut VariationalState,
    posterior: &mut Posterior,
    beta: f64,
    batch: Option<(usize, &mut ChaCha8Rng)>,
) -> Result<NatgradInfo> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidModel(format!(
            "natural-gradient step {beta} outside [0, 1]"
        )));
    }
    if beta == 0.0 {
        return Ok(NatgradInfo::default());
    }
    let compiled = &posterior.compiled;
    let grads = match batch {
        Some((b, rng)) => minibatch_ell(problem, compiled, &posterior.smoothed, b, rng, true)?,
        None => ell_gradients(problem, compiled, &posterior.smoothed, true)?,
    };
    let mut info = NatgradInfo::default();
    let block = compiled.prior.site_block();
    for (k, g) in grads.into_iter().enumerate() {
        info.ell += g.ell;
        let (mu, _) = compiled.site_marginal(&posterior.smoothed.marginals[k]);
        let mut d_cov = g.d_cov;
        if problem.spec.mean_field {
            for r in 0..d_cov.nrows() {
                for c in 0..d_cov.ncols() {
                    if r / block != c / block {
                        d_cov[(r, c)] = 0.0;
                    }
                }
            }
        }
        let mut precision = d_cov * -2.0;
        symmetrize(&mut precision);
        let has_terms = !compiled.term_ranges[k].is_empty();
        if has_terms {
            let scale = precision
                .iter()
                .fold(0.0_f64, |a, v| a.max(v.abs()))
                .max(1.0);
            let min_eig = min_eigenvalue(&precision);
            if min_eig < -1e-10 * scale {
                match problem.spec.curvature {
                    Curvature::ExactClipped => precision = clip_eigenvalues(&precision, 0.0),
                    Curvature::Exact => return Err(Error::SitePrecisionNotPsd { step: k }),
                    Curvature::GaussNewton => info.psd_failures += 1,
                }
            }
        }
        let shift = g.d_mean + &precision * &mu;
        let site = &mut state.sites[k];
        site.precision = &site.precision * (1.0 - beta) + precision * beta;
        symmetrize(&mut site.precision);
        site.shift = &site.shift * (1.0 - beta) + shift * beta;
    }
    state.beta = beta;
    posterior.prepared = PreparedSites::new(&posterior.compiled, &state.sites)?;
    posterior.smoothed = smooth_sites(&posterior.compiled, &posterior.prepared)?;
    Ok(info)
}

/// Single forward extended-Kalman pass with exact updates for Gaussian
/// terms and linearised updates for residual terms, then RTS smoothing.
pub fn eks_solve(problem: &Problem, hyper: &Hyperparameters) -> Result<SmoothingResult> {
    let compiled = problem.compile(hyper)?;
    eks_on(problem, &compiled)
}

fn eks_on(problem: &Problem, compiled: &Compiled) -> Result<SmoothingResult> {
    let n_state = compiled.prior.state_dim();
    let lift = |ct: &CompiledTerm| -> DMatrix<f64> {
        let mut h = DMatrix::zeros(ct.map.nrows(), n_state);
        for (a, &c) in ct.cols.iter().enumerate() {
            let sc = compiled.site_to_state[c];
            for r in 0..ct.map.nrows() {
                h[(r, sc)] += ct.map[(r, a)];
            }
        }
        h
    };
    let filt = filter_with(&compiled.model, |k, mut belief| {
        let range = compiled.term_ranges[k].clone();
        if range.is_empty() {
            return Ok((belief, 0.0));
        }
        let mut ll = 0.0;
        // Gaussian terms: one stacked exact update.
        let mut rows: Vec<DMatrix<f64>> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        let mut covs: Vec<DMatrix<f64>> = Vec::new();
        let mut residuals = Vec::new();
        for i in range {
            let ct = &compiled.terms[i];
            match &problem.terms[i].lik {
                Likelihood::Gaussian { y, noise } => {
                    rows.push(lift(ct));
                    ys.extend(y.iter());
                    let mut r = DMatrix::from_diagonal(&DVector::from_iterator(
                        y.len(),
                        noise.iter().map(|&j| compiled.noise[j]),
                    ));
                    if let Some(e) = &ct.extra {
                        r += e;
                    }
                    covs.push(r);
                }
                Likelihood::Residual { residual, noise } => {
                    residuals.push((i, residual.clone(), *noise))
                }
                Likelihood::Probit { .. } => {
                    return Err(Error::InvalidModel(
                        "probit terms are not supported by the EKS solver".into(),
                    ))
                }
            }
        }
        if !rows.is_empty() {
            let h = stack_rows(&rows, n_state);
            let r = crate::linalg::block_diag(&covs);
            let (b, l) = linear_update(&belief, &h, &DVector::from_vec(ys), &r, k)?;
            belief = b;
            ll += l;
        }
        if !residuals.is_empty() {
            let lifted: Vec<DMatrix<f64>> = residuals
                .iter()
                .map(|(i, _, _)| lift(&compiled.terms[*i]))
                .collect();
            let emission = stack_rows(&lifted, n_state);
            let sizes: Vec<usize> = lifted.iter().map(|m| m.nrows()).collect();
            let outs: Vec<usize> = residuals.iter().map(|(_, r, _)| r.outputs()).collect();
            let total_out: usize = outs.iter().sum();
            let z0 = &emission * &belief.mean;
            // Noise plus the linearised conditional spread.
            let mut noise = DMatrix::zeros(total_out, total_out);
            let mut off_in = 0;
            let mut off_out = 0;
            for (t, (i, res, nidx)) in residuals.iter().enumerate() {
                let zi = z0.rows(off_in, sizes[t]).into_owned();
                let j = res.jacobian(&zi);
                let mut blk = DMatrix::identity(outs[t], outs[t]) * compiled.noise[*nidx];
                if let Some(e) = &compiled.terms[*i].extra {
                    blk += &j * e * j.transpose();
                }
                noise
                    .view_mut((off_out, off_out), (outs[t], outs[t]))
                    .copy_from(&blk);
                off_in += sizes[t];
                off_out += outs[t];
            }
            let g = |z: &DVector<f64>| -> (DVector<f64>, DMatrix<f64>) {
                let mut val = DVector::zeros(total_out);
                let mut jac = DMatrix::zeros(total_out, z.len());
                let mut off_in = 0;
                let mut off_out = 0;
                for (t, (_, res, _)) in residuals.iter().enumerate() {
                    let zi = z.rows(off_in, sizes[t]).into_owned();
                    val.rows_mut(off_out, outs[t]).copy_from(&res.eval(&zi));
                    jac.view_mut((off_out, off_in), (outs[t], sizes[t]))
                        .copy_from(&res.jacobian(&zi));
                    off_in += sizes[t];
                    off_out += outs[t];
                }
                (val, jac)
            };
            let (b, l) = ek_update(&belief, &emission, g, &DVector::zeros(total_out), &noise, k)?;
            belief = b;
            ll += l;
        }
        Ok((belief, ll))
    })?;
    rts_smooth(&compiled.model, &filt)
}

fn stack_rows(blocks: &[DMatrix<f64>], cols: usize) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(b);
        r += b.nrows();
    }
    out
}

/// A prediction location.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub time: f64,
    pub points: Vec<Vec<f64>>,
}

impl Query {
    pub fn at(time: f64, point: Vec<f64>) -> Self {
        Query {
            time,
            points: vec![point],
        }
    }
}

/// Gaussian predictive over the requested output components.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Prediction {
    pub fn variance(&self, i: usize) -> f64 {
        self.cov[(i, i)]
    }
}

/// Options for [`predict`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PredictOptions {
    /// Refuse queries whose locations are not state nodes.
    pub exact_only: bool,
}

/// Posterior marginals of the mixed outputs `components` at each query.
pub fn predict(
    problem: &Problem,
    state: &VariationalState,
    queries: &[Query],
    components: &[usize],
    options: PredictOptions,
) -> Result<Vec<Prediction>> {
    if options.exact_only {
        let nodes: std::collections::HashSet<Vec<u64>> = problem
            .nodes
            .iter()
            .map(|p| point_key(std::slice::from_ref(p)))
            .collect();
        for q in queries {
            for p in &q.points {
                if !nodes.contains(&point_key(std::slice::from_ref(p))) {
                    return Err(Error::QueryOutsideSpatialModel(p.clone()));
                }
            }
        }
    }
    for &c in components {
        if c >= problem.spec.generative.out_dim() {
            return Err(Error::ShapeMismatch(format!(
                "output component {c} out of range"
            )));
        }
    }
    let qtimes: Vec<f64> = queries.iter().map(|q| q.time).collect();
    let grid = time_union(&problem.times, &qtimes);
    let compiled = problem.compile_on(&state.hyper, &grid)?;
    let smoothed = if state.mode == Mode::Eks {
        eks_on(problem, &compiled)?
    } else {
        let site_dim = compiled.prior.site_dim();
        let by_time: HashMap<u64, usize> = state
            .times
            .iter()
            .enumerate()
            .map(|(i, t)| (t.to_bits(), i))
            .collect();
        let sites: Vec<SiteParams> = grid
            .iter()
            .map(|t| match by_time.get(&t.to_bits()) {
                Some(&i) => state.sites[i].clone(),
                None => SiteParams::zeros(site_dim),
            })
            .collect();
        let prepared = PreparedSites::new(&compiled, &sites)?;
        smooth_sites(&compiled, &prepared)?
    };
    let index: HashMap<u64, usize> = grid
        .iter()
        .enumerate()
        .map(|(i, t)| (t.to_bits(), i))
        .collect();
    let mut site_marg: HashMap<usize, (DVector<f64>, DMatrix<f64>)> = HashMap::new();
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let k = index[&q.time.to_bits()];
        let (mu, cov) = site_marg
            .entry(k)
            .or_insert_with(|| compiled.site_marginal(&smoothed.marginals[k]))
            .clone();
        let ct = compiled.query_term(&problem.spec.generative, k, &q.points, components)?;
        let (m, _, s) = term_moments(&ct, &mu, &cov);
        out.push(Prediction { mean: m, cov: s });
    }
    Ok(out)
}

/// Step-size schedule for natural-gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NatgradSchedule {
    pub warmup_epochs: usize,
    pub warmup_beta: f64,
    pub beta: f64,
}

impl NatgradSchedule {
    pub fn conjugate() -> Self {
        NatgradSchedule {
            warmup_epochs: 0,
            warmup_beta: 1.0,
            beta: 1.0,
        }
    }

    pub fn beta_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            self.warmup_beta
        } else {
            self.beta
        }
    }
}

impl Default for NatgradSchedule {
    fn default() -> Self {
        NatgradSchedule {
            warmup_epochs: 100,
            warmup_beta: 0.01,
            beta: 0.1,
        }
    }
}

/// Outer-loop settings.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub epochs: usize,
    pub adam_lr: f64,
    pub inner_steps: usize,
    pub schedule: NatgradSchedule,
    /// Fraction of epochs during which noise variances stay fixed.
    pub noise_freeze_fraction: f64,
    pub fd_step: f64,
    pub batch: Option<usize>,
    pub seed: u64,
    pub threads: usize,
    /// Hyperparameters excluded from optimisation.
    pub fixed: Vec<String>,
    /// Evaluate held-out metrics every this many epochs (0 disables).
    pub eval_every: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 100,
            adam_lr: 0.01,
            inner_steps: 1,
            schedule: NatgradSchedule::default(),
            noise_freeze_fraction: 0.4,
            fd_step: 1e-4,
            batch: None,
            seed: 0,
            threads: 1,
            fixed: Vec::new(),
            eval_every: 10,
        }
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub elbo: f64,
    pub ell: f64,
    pub rmse: f64,
    pub nlpd: f64,
    pub seconds: f64,
}

/// Result of [`fit`]: the last good state, the trace and any divergence.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub state: VariationalState,
    pub trace: Vec<TraceRow>,
    pub diverged: Option<Error>,
    pub psd_failures: usize,
}

/// Held-out evaluation hook: returns `(rmse, nlpd)`.
pub type Monitor<'a> = dyn FnMut(&Problem, &VariationalState) -> Option<(f64, f64)> + 'a;

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    /// Ascent step on `x` along `grad` for the entries in `active`.
    fn step(&mut self, x: &mut [f64], grad: &[f64], active: &[bool]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        for i in 0..x.len() {
            if !active[i] {
                continue;
            }
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            let mh = self.m[i] / (1.0 - B1.powi(self.t));
            let vh = self.v[i] / (1.0 - B2.powi(self.t));
            x[i] += self.lr * mh / (vh.sqrt() + EPS);
        }
    }
}

fn probe_elbo(problem: &Problem, hyper: &Hyperparameters, sites: &[SiteParams]) -> Result<f64> {
    let compiled = problem.compile(hyper)?;
    let prepared = PreparedSites::new(&compiled, sites)?;
    let smoothed = smooth_sites(&compiled, &prepared)?;
    Ok(elbo_from(problem, &compiled, &prepared, &smoothed)?.total)
}

/// Runs `f` over `items` on up to `threads` scoped threads, preserving order.
fn parallel_map<T: Sync, U: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> U + Sync,
) -> Vec<U> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<U>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Central finite-difference ELBO gradient in log-hyperparameter space,
/// with sites held fixed.
pub fn hyper_gradient(
    problem: &Problem,
    state: &VariationalState,
    active: &[bool],
    step: f64,
    threads: usize,
) -> Result<Vec<f64>> {
    let mut probes = Vec::new();
    for (i, &a) in active.iter().enumerate() {
        if !a {
            continue;
        }
        for sign in [1.0, -1.0] {
            let mut h = state.hyper.clone();
            h.log_values[i] += sign * step;
            probes.push((i, sign, h));
        }
    }
    let values = parallel_map(&probes, threads, |(_, _, h)| {
        probe_elbo(problem, h, &state.sites)
    });
    let mut grad = vec![0.0; active.len()];
    for ((i, sign, _), v) in probes.iter().zip(values) {
        grad[*i] += sign * v? / (2.0 * step);
    }
    Ok(grad)
}

/// Alternates natural-gradient site updates with Adam steps on the
/// log-hyperparameters.
pub fn fit(
    problem: &Problem,
    config: &FitConfig,
    monitor: Option<&mut Monitor<'_>>,
) -> Result<FitOutput> {
    let state = problem.initial_state(config.seed)?;
    fit_from(problem, state, config, monitor)
}

/// Continues training from `state`.
pub fn fit_from(
    problem: &Problem,
    mut state: VariationalState,
    config: &FitConfig,
    mut monitor: Option<&mut Monitor<'_>>,
) -> Result<FitOutput> {
    let start = Instant::now();
    let mut trace = Vec::new();
    if problem.spec.mode == Mode::Eks {
        let smoothed = eks_solve(problem, &state.hyper)?;
        state.epoch += 1;
        let (rmse, nlpd) = match monitor.as_mut() {
            Some(m) => m(problem, &state).unwrap_or((f64::NAN, f64::NAN)),
            None => (f64::NAN, f64::NAN),
        };
        trace.push(TraceRow {
            epoch: 1,
            elbo: smoothed.log_marginal,
            ell: f64::NAN,
            rmse,
            nlpd,
            seconds: start.elapsed().as_secs_f64(),
        });
        return Ok(FitOutput {
            state,
            trace,
            diverged: None,
            psd_failures: 0,
        });
    }
    let conjugate = problem.is_conjugate();
    let schedule = if conjugate {
        NatgradSchedule::conjugate()
    } else {
        config.schedule
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(state.hyper.len(), config.adam_lr);
    let freeze_until = (config.noise_freeze_fraction * config.epochs as f64).round() as usize;
    let mut psd_failures = 0;
    let mut posterior = Posterior::new(problem, &state)?;
    let mut last_good = state.clone();
    for epoch in 0..config.epochs {
        let beta = schedule.beta_at(state.epoch);
        let mut ell = 0.0;
        for _ in 0..config.inner_steps.max(1) {
            let batch = config.batch.map(|b| (b, &mut rng));
            let info = natgrad_step(problem, &mut state, &mut posterior, beta, batch)?;
            psd_failures += info.psd_failures;
            ell = info.ell;
        }
        let report = posterior.elbo(problem)?;
        if !report.total.is_finite() {
            return Ok(FitOutput {
                state: last_good,
                trace,
                diverged: Some(Error::Diverged {
                    epoch,
                    reason: "non-finite ELBO".into(),
                }),
                psd_failures,
            });
        }
        last_good = state.clone();
        let active: Vec<bool> = (0..state.hyper.len())
            .map(|i| {
                !config.fixed.contains(&state.hyper.names[i])
                    && !(state.hyper.is_noise(i) && epoch < freeze_until)
            })
            .collect();
        if active.iter().any(|a| *a) {
            let grad = hyper_gradient(problem, &state, &active, config.fd_step, config.threads)?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Ok(FitOutput {
                    state: last_good,
                    trace,
                    diverged: Some(Error::Diverged {
                        epoch,
                        reason: "non-finite hyperparameter gradient".into(),
                    }),
                    psd_failures,
                });
            }
            adam.step(&mut state.hyper.log_values, &grad, &active);
            posterior = Posterior::new(problem, &state)?;
        }
        state.epoch += 1;
        let evaluate = config.eval_every > 0
            && ((epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs);
        let (rmse, nlpd) = match (evaluate, monitor.as_mut()) {
            (true, Some(m)) => m(problem, &state).unwrap_or((f64::NAN, f64::NAN)),
            _ => (f64::NAN, f64::NAN),
        };
        trace.push(TraceRow {
            epoch: epoch + 1,
            elbo: report.total,
            ell,
            rmse,
            nlpd,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(FitOutput {
        state,
        trace,
        diverged: None,
        psd_failures,
    })
}

/// Term kinds present in a problem (for reporting).
pub fn term_counts(problem: &Problem) -> HashMap<TermKind, usize> {
    let mut out = HashMap::new();
    for t in &problem.terms {
        *out.entry(t.kind).or_insert(0) += 1;
    }
    out
}
