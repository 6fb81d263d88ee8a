//! Small dense linear-algebra helpers shared by the filter, the prior
//! assembly and the dense oracle.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative jitter added to gram diagonals before factorisation.
pub const DEFAULT_JITTER: f64 = 1e-8;

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn symmetrized(mut m: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&mut m);
    m
}

/// Cholesky factorisation that retries with growing diagonal jitter.
///
/// The first attempt uses no jitter; subsequent attempts add
/// `jitter * scale * 10^k` where `scale` is the mean absolute diagonal.
pub fn robust_cholesky(m: &DMatrix<f64>, jitter: f64) -> Option<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Some(c);
    }
    let n = m.nrows();
    if n == 0 {
        return Cholesky::new(m.clone());
    }
    let scale = (m.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64).max(1e-300);
    let mut eps = jitter.max(1e-15) * scale;
    for _ in 0..6 {
        let mut shifted = m.clone();
        for i in 0..n {
            shifted[(i, i)] += eps;
        }
        if let Some(c) = Cholesky::new(shifted) {
            return Some(c);
        }
        eps *= 10.0;
    }
    None
}

pub fn cholesky_or(m: &DMatrix<f64>, jitter: f64, what: &str) -> Result<Cholesky<f64, Dyn>> {
    robust_cholesky(m, jitter).ok_or_else(|| Error::GramNotPsd(what.to_string()))
}

pub fn log_det_from_cholesky(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Low-rank square root of a PSD matrix: returns `(rows, values)` where
/// `m ≈ rowsᵀ · rows` and each row carries eigenvalue `values[i]`
/// (already folded in). Eigenvalues below `tol · max_eig` are dropped.
pub fn psd_factor(m: &DMatrix<f64>, tol: f64) -> (DMatrix<f64>, Vec<f64>) {
    let n = m.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), Vec::new());
    }
    let eig = SymmetricEigen::new(symmetrized(m.clone()));
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    if max_eig <= 0.0 {
        return (DMatrix::zeros(0, n), Vec::new());
    }
    let keep: Vec<usize> = (0..n)
        .filter(|&i| eig.eigenvalues[i] > tol * max_eig)
        .collect();
    let mut rows = DMatrix::zeros(keep.len(), n);
    let mut values = Vec::with_capacity(keep.len());
    for (r, &i) in keep.iter().enumerate() {
        let s = eig.eigenvalues[i];
        let sq = s.sqrt();
        for j in 0..n {
            rows[(r, j)] = sq * eig.eigenvectors[(j, i)];
        }
        values.push(s);
    }
    (rows, values)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrized(m.clone()))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Clips eigenvalues of a symmetric matrix from below.
pub fn clip_eigenvalues(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrized(m.clone()));
    let clipped = eig.eigenvalues.map(|v| v.max(floor));
    let v = &eig.eigenvectors;
    symmetrized(v * DMatrix::from_diagonal(&clipped) * v.transpose())
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Log density of `N(y | mean, cov)`.
pub fn gaussian_log_density(
    y: &DVector<f64>,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<f64> {
    let n = y.len();
    let chol = robust_cholesky(cov, DEFAULT_JITTER)
        .ok_or_else(|| Error::GramNotPsd("gaussian_log_density".into()))?;
    let r = y - mean;
    let alpha = chol.solve(&r);
    Ok(-0.5 * r.dot(&alpha)
        - 0.5 * log_det_from_cholesky(&chol)
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
}
