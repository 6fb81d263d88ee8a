//! Gauss–Hermite rules for expectations under Gaussians.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Default number of nodes per dimension.
pub const DEFAULT_ORDER: usize = 20;

/// Largest number of dimensions a tensor-product rule is built for.
pub const MAX_DIMS: usize = 3;

/// One-dimensional rule for `E[f(x)]`, `x ~ N(0, 1)`; weights sum to one.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub–Welsch construction from the probabilists' Hermite recurrence.
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "quadrature order must be positive");
        let mut jacobi = DMatrix::zeros(order, order);
        for k in 1..order {
            let b = (k as f64).sqrt();
            jacobi[(k - 1, k)] = b;
            jacobi[(k, k - 1)] = b;
        }
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..order)
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        GaussHermite {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1 / total).collect(),
        }
    }
}

/// Tensor-product rule in `dims` standard-normal dimensions.
#[derive(Debug, Clone)]
pub struct TensorRule {
    pub dims: usize,
    /// Row-per-node matrix of standard-normal coordinates.
    pub nodes: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
}

impl TensorRule {
    pub fn new(dims: usize, order: usize) -> Result<Self> {
        if dims > MAX_DIMS {
            return Err(Error::QuadratureOverflow { dims, order });
        }
        let base = GaussHermite::new(order);
        let count = order.pow(dims as u32);
        let mut nodes = Vec::with_capacity(count);
        let mut weights = Vec::with_capacity(count);
        for flat in 0..count {
            let mut rem = flat;
            let mut x = DVector::zeros(dims);
            let mut w = 1.0;
            for d in 0..dims {
                let i = rem % order;
                rem /= order;
                x[d] = base.nodes[i];
                w *= base.weights[i];
            }
            nodes.push(x);
            weights.push(w);
        }
        Ok(TensorRule {
            dims,
            nodes,
            weights,
        })
    }
}
