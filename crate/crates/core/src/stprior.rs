//! Spatio-temporal derivative priors as one state-space model.
//!
//! Per time step the state stacks, for each latent `q`, the temporal state
//! components `j < d_q` of every spatial node `n` and every carried spatial
//! derivative `i`, in that nesting order: index
//! `offset_q + (j · M + n) · s + i` with `s` spatial orders per node.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{ContinuousStateModel, KernelSpec, IWP_INITIAL_VARIANCE};
use crate::linalg::{block_diag, robust_cholesky, symmetrize, DEFAULT_JITTER};
use crate::ssm::{predict, DiscreteStateModel, GaussianBelief};

/// Number of temporal (`d_t`) and spatial (`d_s`) derivative orders kept,
/// counting the function value itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivativeOrders {
    pub d_t: usize,
    pub d_s: usize,
}

impl DerivativeOrders {
    pub fn new(d_t: usize, d_s: usize) -> Result<Self> {
        if d_t == 0 || d_s == 0 {
            return Err(Error::InvalidModel(
                "derivative counts must be at least 1".into(),
            ));
        }
        Ok(DerivativeOrders { d_t, d_s })
    }

    /// `D = d_t · d_s`; derivative `(j, i)` sits at `j · d_s + i`.
    pub fn total(&self) -> usize {
        self.d_t * self.d_s
    }
}

/// Product kernel over spatial axes with derivatives along `deriv_axis`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialKernel {
    pub factors: Vec<KernelSpec>,
    pub deriv_axis: usize,
}

impl SpatialKernel {
    pub fn new(factors: Vec<KernelSpec>) -> Self {
        SpatialKernel {
            factors,
            deriv_axis: 0,
        }
    }

    /// Kernel over zero spatial dimensions (a single implicit location).
    pub fn none() -> Self {
        SpatialKernel {
            factors: Vec::new(),
            deriv_axis: 0,
        }
    }

    pub fn dims(&self) -> usize {
        self.factors.len()
    }

    /// Derivative gram between location lists; entry
    /// `(i · L + a, j · R + b) = ∂^a ∂^b k(X_i, X2_j)` along the derivative axis.
    pub fn gram(
        &self,
        x: &[Vec<f64>],
        x2: &[Vec<f64>],
        left: usize,
        right: usize,
    ) -> Result<DMatrix<f64>> {
        if self.factors.is_empty() {
            if left > 1 || right > 1 {
                return Err(Error::InsufficientDerivativeOrders(
                    "spatial derivatives requested without spatial inputs".into(),
                ));
            }
            return Ok(DMatrix::from_element(x.len(), x2.len(), 1.0));
        }
        for p in x.iter().chain(x2.iter()) {
            if p.len() != self.factors.len() {
                return Err(Error::ShapeMismatch(format!(
                    "spatial point of dimension {} for kernel over {} axes",
                    p.len(),
                    self.factors.len()
                )));
            }
        }
        let ax = self.deriv_axis;
        let xa: Vec<f64> = x.iter().map(|p| p[ax]).collect();
        let x2a: Vec<f64> = x2.iter().map(|p| p[ax]).collect();
        let mut out = self.factors[ax].derivative_gram(&xa, &x2a, left, right)?;
        for (k, f) in self.factors.iter().enumerate() {
            if k == ax {
                continue;
            }
            for (i, p) in x.iter().enumerate() {
                for (j, p2) in x2.iter().enumerate() {
                    let v = f.eval(p[k], p2[k])?;
                    for a in 0..left {
                        for b in 0..right {
                            out[(i * left + a, j * right + b)] *= v;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// One independent latent function: temporal kernel × spatial kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPrior {
    pub temporal: KernelSpec,
    pub spatial: SpatialKernel,
}

struct NodeFactor {
    gram: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

/// Cache of node-gram factorisations keyed by kernel hyperparameters.
/// Concurrent readers are allowed; insertions take the write lock.
#[derive(Default)]
pub struct SpatialCache {
    entries: RwLock<HashMap<Vec<u64>, Arc<NodeFactor>>>,
}

const CACHE_CAPACITY: usize = 256;

impl SpatialCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.read().map(|m| m.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get_or_insert(
        &self,
        key: Vec<u64>,
        build: impl FnOnce() -> Result<NodeFactor>,
    ) -> Result<Arc<NodeFactor>> {
        if let Ok(map) = self.entries.read() {
            if let Some(f) = map.get(&key) {
                return Ok(f.clone());
            }
        }
        let factor = Arc::new(build()?);
        if let Ok(mut map) = self.entries.write() {
            if map.len() >= CACHE_CAPACITY {
                map.clear();
            }
            map.insert(key, factor.clone());
        }
        Ok(factor)
    }
}

impl std::fmt::Debug for SpatialCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpatialCache")
            .field("entries", &self.len())
            .finish()
    }
}

fn cache_key(kernel: &SpatialKernel, node_orders: usize, nodes: &[Vec<f64>]) -> Vec<u64> {
    let mut key = vec![
        node_orders as u64,
        kernel.deriv_axis as u64,
        nodes.len() as u64,
    ];
    for f in &kernel.factors {
        key.push(f.lengthscale.to_bits());
        key.push(f.variance.to_bits());
        key.push(match f.family {
            crate::kernels::KernelFamily::Matern12 => 1,
            crate::kernels::KernelFamily::Matern32 => 2,
            crate::kernels::KernelFamily::Matern52 => 3,
            crate::kernels::KernelFamily::Matern72 => 4,
            crate::kernels::KernelFamily::SquaredExponential => 5,
            crate::kernels::KernelFamily::IntegratedWiener { order } => 100 + order as u64,
        });
    }
    for p in nodes {
        key.extend(p.iter().map(|v| v.to_bits()));
    }
    key
}

/// Spatial conditional `f^D(X) | u(Z) ~ N(projector · u, residual)` for one latent.
#[derive(Debug, Clone)]
pub struct SpatialConditional {
    /// `(L · d_s) × (M · s)` with `s` the spatial orders carried by the state.
    pub projector: DMatrix<f64>,
    /// Joint conditional covariance over the `L` query locations, `(L · d_s)²`.
    pub residual: DMatrix<f64>,
}

impl SpatialConditional {
    /// Per-location `d_s × d_s` blocks of the residual covariance.
    pub fn residual_blocks(&self, d_s: usize) -> Vec<DMatrix<f64>> {
        let l = self.residual.nrows() / d_s;
        (0..l)
            .map(|n| {
                self.residual
                    .view((n * d_s, n * d_s), (d_s, d_s))
                    .into_owned()
            })
            .collect()
    }
}

/// Assembled spatio-temporal prior with a fixed set of spatial nodes.
pub struct StPrior {
    pub latents: Vec<LatentPrior>,
    pub orders: DerivativeOrders,
    pub nodes: Vec<Vec<f64>>,
    /// Spatial derivative orders carried in the state (`d_s`, or 1 for the
    /// structured approximation).
    pub node_orders: usize,
    temporal: Vec<ContinuousStateModel>,
    node_factors: Vec<Arc<NodeFactor>>,
    jitter: f64,
}

impl std::fmt::Debug for StPrior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StPrior")
            .field("latents", &self.latents)
            .field("orders", &self.orders)
            .field("nodes", &self.nodes.len())
            .field("node_orders", &self.node_orders)
            .finish()
    }
}

/// Options for [`assemble_prior`].
#[derive(Debug, Clone, Copy)]
pub struct PriorOptions {
    pub node_orders: usize,
    pub iwp_initial_variance: f64,
    pub jitter: f64,
}

impl PriorOptions {
    pub fn full(orders: DerivativeOrders) -> Self {
        PriorOptions {
            node_orders: orders.d_s,
            iwp_initial_variance: IWP_INITIAL_VARIANCE,
            jitter: DEFAULT_JITTER,
        }
    }
}

pub fn check_distinct(points: &[Vec<f64>]) -> Result<()> {
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        let key: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
        if seen.insert(key, i).is_some() {
            return Err(Error::DuplicateSpatialLocation(i));
        }
    }
    Ok(())
}

/// Builds the Kronecker-structured state-space prior over `nodes`.
pub fn assemble_prior(
    latents: Vec<LatentPrior>,
    orders: DerivativeOrders,
    nodes: Vec<Vec<f64>>,
    options: PriorOptions,
    cache: Option<&SpatialCache>,
) -> Result<StPrior> {
    if latents.is_empty() {
        return Err(Error::InvalidModel(
            "at least one latent function is required".into(),
        ));
    }
    if nodes.is_empty() {
        return Err(Error::InvalidModel(
            "at least one spatial node is required".into(),
        ));
    }
    if options.node_orders != 1 && options.node_orders != orders.d_s {
        return Err(Error::InvalidModel(format!(
            "state may carry 1 or {} spatial orders, got {}",
            orders.d_s, options.node_orders
        )));
    }
    check_distinct(&nodes)?;
    let mut temporal = Vec::with_capacity(latents.len());
    let mut node_factors = Vec::with_capacity(latents.len());
    for lp in &latents {
        temporal.push(
            lp.temporal
                .state_space_form_with(orders.d_t, options.iwp_initial_variance)?,
        );
        for f in &lp.spatial.factors {
            f.validate()?;
            if !f.family.is_stationary() {
                return Err(Error::NonStationary(f.family.name()));
            }
        }
        if !lp.spatial.factors.is_empty() && lp.spatial.deriv_axis >= lp.spatial.factors.len() {
            return Err(Error::InvalidModel(
                "spatial derivative axis out of range".into(),
            ));
        }
        let build = || -> Result<NodeFactor> {
            let mut gram =
                lp.spatial
                    .gram(&nodes, &nodes, options.node_orders, options.node_orders)?;
            symmetrize(&mut gram);
            let chol = robust_cholesky(&gram, options.jitter)
                .ok_or_else(|| Error::GramNotPsd("spatial node gram".into()))?;
            Ok(NodeFactor { gram, chol })
        };
        let factor = match cache {
            Some(c) => {
                c.get_or_insert(cache_key(&lp.spatial, options.node_orders, &nodes), build)?
            }
            None => Arc::new(build()?),
        };
        node_factors.push(factor);
    }
    Ok(StPrior {
        latents,
        orders,
        nodes,
        node_orders: options.node_orders,
        temporal,
        node_factors,
        jitter: options.jitter,
    })
}

impl StPrior {
    pub fn num_latents(&self) -> usize {
        self.latents.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn node_block(&self) -> usize {
        self.nodes.len() * self.node_orders
    }

    pub fn temporal_state_dim(&self, q: usize) -> usize {
        self.temporal[q].state_dim()
    }

    pub fn temporal_model(&self, q: usize) -> &ContinuousStateModel {
        &self.temporal[q]
    }

    /// Node gram `K_s(Z, Z)` with carried spatial orders, for latent `q`.
    pub fn node_gram(&self, q: usize) -> &DMatrix<f64> {
        &self.node_factors[q].gram
    }

    pub fn latent_state_offset(&self, q: usize) -> usize {
        (0..q)
            .map(|p| self.temporal[p].state_dim() * self.node_block())
            .sum()
    }

    pub fn state_dim(&self) -> usize {
        self.latent_state_offset(self.num_latents())
    }

    /// Per-latent width of the site vector (`d_t · M · s`).
    pub fn site_block(&self) -> usize {
        self.orders.d_t * self.node_block()
    }

    pub fn site_dim(&self) -> usize {
        self.num_latents() * self.site_block()
    }

    /// Site index of latent `q`, temporal order `j`, node `n`, spatial order `i`.
    pub fn site_index(&self, q: usize, j: usize, n: usize, i: usize) -> usize {
        q * self.site_block() + (j * self.num_nodes() + n) * self.node_orders + i
    }

    /// Selector from the state onto the site vector (the first `d_t`
    /// temporal components of every latent).
    pub fn site_emission(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.site_dim(), self.state_dim());
        let nb = self.node_block();
        for q in 0..self.num_latents() {
            let so = self.latent_state_offset(q);
            for r in 0..self.site_block() {
                h[(q * self.site_block() + r, so + r)] = 1.0;
            }
            debug_assert!(self.orders.d_t * nb == self.site_block());
        }
        h
    }

    fn initial_cov(&self) -> DMatrix<f64> {
        let blocks: Vec<DMatrix<f64>> = (0..self.num_latents())
            .map(|q| {
                self.temporal[q]
                    .initial_cov
                    .kronecker(&self.node_factors[q].gram)
            })
            .collect();
        block_diag(&blocks)
    }

    /// Transition and process noise for a step of length `dt`.
    pub fn transition(&self, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let nb = self.node_block();
        let eye = DMatrix::<f64>::identity(nb, nb);
        let mut a_blocks = Vec::with_capacity(self.num_latents());
        let mut q_blocks = Vec::with_capacity(self.num_latents());
        for q in 0..self.num_latents() {
            let (a, qn) = self.temporal[q].discretize(dt);
            a_blocks.push(a.kronecker(&eye));
            q_blocks.push(qn.kronecker(&self.node_factors[q].gram));
        }
        (block_diag(&a_blocks), block_diag(&q_blocks))
    }

    /// Discrete model on sorted `times`; equal step lengths share storage.
    pub fn discrete_model(&self, times: &[f64]) -> Result<DiscreteStateModel> {
        check_sorted(times)?;
        let d = self.state_dim();
        let mut cache: HashMap<u64, Arc<(DMatrix<f64>, DMatrix<f64>)>> = HashMap::new();
        let mut transitions = Vec::with_capacity(times.len().saturating_sub(1));
        for w in times.windows(2) {
            let dt = w[1] - w[0];
            let entry = cache
                .entry(dt.to_bits())
                .or_insert_with(|| Arc::new(self.transition(dt)))
                .clone();
            transitions.push(entry);
        }
        Ok(DiscreteStateModel {
            initial: GaussianBelief::new(DVector::zeros(d), self.initial_cov()),
            transitions,
        })
    }

    /// Prior marginal covariance of the first `d_t` temporal components of
    /// each latent at every time: `[time][latent]`.
    pub fn temporal_marginals(&self, times: &[f64]) -> Vec<Vec<DMatrix<f64>>> {
        let d_t = self.orders.d_t;
        let mut out = vec![Vec::with_capacity(self.num_latents()); times.len()];
        for q in 0..self.num_latents() {
            let model = &self.temporal[q];
            match &model.stationary_cov {
                Some(p) => {
                    let block = p.view((0, 0), (d_t, d_t)).into_owned();
                    for row in out.iter_mut() {
                        row.push(block.clone());
                    }
                }
                None => {
                    let d = model.state_dim();
                    let mut b = GaussianBelief::new(DVector::zeros(d), model.initial_cov.clone());
                    for (k, row) in out.iter_mut().enumerate() {
                        if k > 0 {
                            let (a, qn) = model.discretize(times[k] - times[k - 1]);
                            b = predict(&b, &a, &qn);
                        }
                        row.push(b.cov.view((0, 0), (d_t, d_t)).into_owned());
                    }
                }
            }
        }
        out
    }

    /// Spatial conditional of latent `q` at `points` given its node values.
    pub fn conditional(&self, q: usize, points: &[Vec<f64>]) -> Result<SpatialConditional> {
        let d_s = self.orders.d_s;
        let s = self.node_orders;
        let kernel = &self.latents[q].spatial;
        let factor = &self.node_factors[q];
        let kxz = kernel.gram(points, &self.nodes, d_s, s)?;
        let projector = factor.chol.solve(&kxz.transpose()).transpose();
        let kxx = kernel.gram(points, points, d_s, d_s)?;
        let mut residual = kxx - &projector * kxz.transpose();
        symmetrize(&mut residual);
        let mut cond = SpatialConditional {
            projector,
            residual,
        };
        if s == d_s {
            self.snap_exact_nodes(points, &mut cond);
        }
        Ok(cond)
    }

    /// Locations that coincide with a node are read off the state exactly.
    fn snap_exact_nodes(&self, points: &[Vec<f64>], cond: &mut SpatialConditional) {
        let d_s = self.orders.d_s;
        let index: HashMap<Vec<u64>, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, p)| (p.iter().map(|v| v.to_bits()).collect(), i))
            .collect();
        for (l, p) in points.iter().enumerate() {
            let key: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
            if let Some(&n) = index.get(&key) {
                for i in 0..d_s {
                    let r = l * d_s + i;
                    cond.projector.row_mut(r).fill(0.0);
                    cond.projector[(r, n * d_s + i)] = 1.0;
                    cond.residual.row_mut(r).fill(0.0);
                    cond.residual.column_mut(r).fill(0.0);
                }
            }
        }
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }
}

pub fn check_sorted(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::ShapeMismatch("empty time grid".into()));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::ShapeMismatch(
            "times must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Sparse (inducing-point) conditional of a spatial kernel: nodes carry the
/// full derivative set.
pub fn sparse_conditional(
    x: &[Vec<f64>],
    z: &[Vec<f64>],
    kernel: &SpatialKernel,
    orders: DerivativeOrders,
) -> Result<SpatialConditional> {
    conditional_with(x, z, kernel, orders.d_s, orders.d_s)
}

/// Structured conditional: nodes carry function values only and all spatial
/// derivatives at `x` are generated by the projection.
pub fn structured_conditional(
    x: &[Vec<f64>],
    z: &[Vec<f64>],
    kernel: &SpatialKernel,
    orders: DerivativeOrders,
) -> Result<SpatialConditional> {
    conditional_with(x, z, kernel, orders.d_s, 1)
}

fn conditional_with(
    x: &[Vec<f64>],
    z: &[Vec<f64>],
    kernel: &SpatialKernel,
    d_s: usize,
    node_orders: usize,
) -> Result<SpatialConditional> {
    check_distinct(z)?;
    let mut kzz = kernel.gram(z, z, node_orders, node_orders)?;
    symmetrize(&mut kzz);
    let chol = robust_cholesky(&kzz, DEFAULT_JITTER)
        .ok_or_else(|| Error::GramNotPsd("inducing gram".into()))?;
    let kxz = kernel.gram(x, z, d_s, node_orders)?;
    let projector = chol.solve(&kxz.transpose()).transpose();
    let kxx = kernel.gram(x, x, d_s, d_s)?;
    let mut residual = kxx - &projector * kxz.transpose();
    symmetrize(&mut residual);
    Ok(SpatialConditional {
        projector,
        residual,
    })
}

/// Orderings of a `(Q, N_t, N_s, D)` tensor, outermost axis first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// `(q, d, n)` with `n = t · N_s + s`.
    LatentData,
    /// `(n, q, d)`.
    DataLatent,
    /// `(t, s, d)`; single latent only.
    TimeSpace,
    /// `(q, t, s, d)`.
    LatentTimeSpace,
    /// `(t, q, s, d)`.
    TimeLatentSpace,
}

impl Layout {
    pub const ALL: [Layout; 5] = [
        Layout::LatentData,
        Layout::DataLatent,
        Layout::TimeSpace,
        Layout::LatentTimeSpace,
        Layout::TimeLatentSpace,
    ];

    fn offset(&self, shape: TensorShape, q: usize, t: usize, s: usize, d: usize) -> usize {
        let TensorShape {
            q: nq,
            t: _nt,
            s: ns,
            d: nd,
        } = shape;
        let n = t * ns + s;
        let nn = shape.t * ns;
        match self {
            Layout::LatentData => (q * nd + d) * nn + n,
            Layout::DataLatent => (n * nq + q) * nd + d,
            Layout::TimeSpace => n * nd + d,
            Layout::LatentTimeSpace => ((q * shape.t + t) * ns + s) * nd + d,
            Layout::TimeLatentSpace => ((t * nq + q) * ns + s) * nd + d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorShape {
    pub q: usize,
    pub t: usize,
    pub s: usize,
    pub d: usize,
}

impl TensorShape {
    pub fn len(&self) -> usize {
        self.q * self.t * self.s * self.d
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reorders `values` from one layout to another.
pub fn permute(values: &[f64], shape: TensorShape, from: Layout, to: Layout) -> Result<Vec<f64>> {
    if values.len() != shape.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} values for shape {:?}",
            values.len(),
            shape
        )));
    }
    if shape.q != 1 && (from == Layout::TimeSpace || to == Layout::TimeSpace) {
        return Err(Error::ShapeMismatch(
            "time-space layout requires a single latent".into(),
        ));
    }
    let mut out = vec![0.0; values.len()];
    for q in 0..shape.q {
        for t in 0..shape.t {
            for s in 0..shape.s {
                for d in 0..shape.d {
                    out[to.offset(shape, q, t, s, d)] = values[from.offset(shape, q, t, s, d)];
                }
            }
        }
    }
    Ok(out)
}

/// Observations on a time × space grid with a missing-value mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridData {
    pub times: Vec<f64>,
    /// `N_s` locations, each with `F − 1` coordinates.
    pub locations: Vec<Vec<f64>>,
    /// Row-major `[t][s][p]`.
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub outputs: usize,
}

impl GridData {
    pub fn new(
        times: Vec<f64>,
        locations: Vec<Vec<f64>>,
        values: Vec<f64>,
        mask: Vec<bool>,
        outputs: usize,
    ) -> Result<Self> {
        check_sorted(&times)?;
        let n = times.len() * locations.len() * outputs;
        if values.len() != n || mask.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "grid of {}x{}x{} with {} values and {} mask entries",
                times.len(),
                locations.len(),
                outputs,
                values.len(),
                mask.len()
            )));
        }
        Ok(GridData {
            times,
            locations,
            values,
            mask,
            outputs,
        })
    }

    pub fn index(&self, t: usize, s: usize, p: usize) -> usize {
        (t * self.locations.len() + s) * self.outputs + p
    }

    pub fn value(&self, t: usize, s: usize, p: usize) -> Option<f64> {
        let i = self.index(t, s, p);
        if self.mask[i] {
            Some(self.values[i])
        } else {
            None
        }
    }

    pub fn num_observed(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelFamily;

    fn se(l: f64) -> KernelSpec {
        KernelSpec::new(KernelFamily::SquaredExponential, l, 1.0).unwrap()
    }

    #[test]
    fn permute_examples() {
        let shape = TensorShape {
            q: 2,
            t: 1,
            s: 2,
            d: 1,
        };
        let ld = [11.0, 12.0, 21.0, 22.0];
        let dl = permute(&ld, shape, Layout::LatentData, Layout::DataLatent).unwrap();
        assert_eq!(dl, vec![11.0, 21.0, 12.0, 22.0]);
        assert_eq!(
            permute(&ld, shape, Layout::LatentData, Layout::LatentData).unwrap(),
            ld.to_vec()
        );
        assert!(matches!(
            permute(&ld, shape, Layout::LatentData, Layout::TimeSpace),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(permute(&ld[..3], shape, Layout::LatentData, Layout::DataLatent).is_err());
    }

    #[test]
    fn duplicate_nodes_are_rejected() {
        let lp = LatentPrior {
            temporal: KernelSpec::new(KernelFamily::Matern32, 1.0, 1.0).unwrap(),
            spatial: SpatialKernel::new(vec![se(1.0)]),
        };
        let orders = DerivativeOrders::new(1, 1).unwrap();
        let err = assemble_prior(
            vec![lp],
            orders,
            vec![vec![0.0], vec![1.0], vec![0.0]],
            PriorOptions::full(orders),
            None,
        );
        assert!(matches!(err, Err(Error::DuplicateSpatialLocation(2))));
    }

    #[test]
    fn single_node_reduces_to_temporal_model() {
        let temporal = KernelSpec::new(KernelFamily::Matern52, 0.7, 1.3).unwrap();
        let lp = LatentPrior {
            temporal,
            spatial: SpatialKernel::none(),
        };
        let orders = DerivativeOrders::new(2, 1).unwrap();
        let prior = assemble_prior(
            vec![lp],
            orders,
            vec![vec![]],
            PriorOptions::full(orders),
            None,
        )
        .unwrap();
        let ss = temporal.state_space_form(2).unwrap();
        let (a, q) = prior.transition(0.3);
        let (a0, q0) = ss.discretize(0.3);
        assert_eq!(a, a0);
        assert_eq!(q, q0);
        assert_eq!(prior.state_dim(), 3);
        assert_eq!(prior.site_dim(), 2);
    }

    #[test]
    fn conditional_at_nodes_is_exact() {
        let k = SpatialKernel::new(vec![se(0.5)]);
        let orders = DerivativeOrders::new(1, 2).unwrap();
        let x = vec![vec![0.0], vec![0.4], vec![1.1]];
        let c = sparse_conditional(&x, &x, &k, orders).unwrap();
        assert!((&c.projector - DMatrix::identity(6, 6)).abs().max() < 1e-8);
        assert!(c.residual.abs().max() < 1e-8);
    }

    #[test]
    fn far_point_keeps_prior_variance() {
        let k = SpatialKernel::new(vec![se(0.3)]);
        let orders = DerivativeOrders::new(1, 2).unwrap();
        let z = vec![vec![0.0], vec![0.5]];
        let c = sparse_conditional(&[vec![50.0]], &z, &k, orders).unwrap();
        let prior = k.gram(&[vec![50.0]], &[vec![50.0]], 2, 2).unwrap();
        assert!((c.residual - prior).abs().max() < 1e-6);
    }

    #[test]
    fn structured_equals_sparse_without_spatial_derivatives() {
        let k = SpatialKernel::new(vec![se(0.8)]);
        let orders = DerivativeOrders::new(2, 1).unwrap();
        let x = vec![vec![0.1], vec![0.7]];
        let z = vec![vec![0.0], vec![0.5], vec![1.0]];
        let a = sparse_conditional(&x, &z, &k, orders).unwrap();
        let b = structured_conditional(&x, &z, &k, orders).unwrap();
        assert_eq!(a.projector, b.projector);
        assert_eq!(a.residual, b.residual);
    }

    #[test]
    fn cache_reuses_factorisations() {
        let cache = SpatialCache::new();
        let lp = LatentPrior {
            temporal: KernelSpec::new(KernelFamily::Matern32, 1.0, 1.0).unwrap(),
            spatial: SpatialKernel::new(vec![se(1.0)]),
        };
        let orders = DerivativeOrders::new(1, 2).unwrap();
        let nodes = vec![vec![0.0], vec![1.0]];
        for _ in 0..3 {
            assemble_prior(
                vec![lp.clone()],
                orders,
                nodes.clone(),
                PriorOptions::full(orders),
                Some(&cache),
            )
            .unwrap();
        }
        assert_eq!(cache.len(), 1);
        let mut other = lp.clone();
        other.spatial.factors[0].lengthscale = 2.0;
        assemble_prior(
            vec![other],
            orders,
            nodes,
            PriorOptions::full(orders),
            Some(&cache),
        )
        .unwrap();
        assert_eq!(cache.len(), 2);
    }
}
