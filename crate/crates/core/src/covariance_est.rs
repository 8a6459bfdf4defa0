//! Sparse covariance estimation by column-wise graphical lasso.
//!
//! The estimate `W` approximates `Σ_Z`. Each sweep visits every column `j`, solves
//! the lasso `min_β ½ βᵀ W₁₁ β − βᵀ s₁₂ + ρ‖β‖₁` and sets `w₁₂ = W₁₁ β`.
//! Diagonal entries are fixed at `s_jj + ρ`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::graphs::VertexSet;
use crate::linalg;

pub const LASSO_TOL: f64 = 1e-8;
const LASSO_MAX_ITER: usize = 10_000;

/// Uncentered sample covariance `(1/n) Σ z zᵀ` of the rows.
pub fn sample_covariance(rows: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let Some(first) = rows.first() else {
        return Err(Error::InvalidArgument("sample covariance of zero rows".into()));
    };
    let k = first.len();
    let mut s = DMatrix::zeros(k, k);
    for z in rows {
        if z.len() != k {
            return Err(Error::DimensionMismatch { expected: k, got: z.len() });
        }
        s.ger(1.0, z, z, 1.0);
    }
    Ok(s / rows.len() as f64)
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// Cyclic coordinate descent for `½ βᵀ W₁₁ β − βᵀ s₁₂ + ρ‖β‖₁`.
pub fn lasso(w11: &DMatrix<f64>, s12: &DVector<f64>, rho: f64) -> Result<DVector<f64>> {
    lasso_warm(w11, s12, rho, DVector::zeros(s12.len()))
}

pub fn lasso_warm(w11: &DMatrix<f64>, s12: &DVector<f64>, rho: f64, init: DVector<f64>) -> Result<DVector<f64>> {
    let k = s12.len();
    if w11.shape() != (k, k) || init.len() != k {
        return Err(Error::DimensionMismatch { expected: k, got: w11.nrows() });
    }
    if !(rho >= 0.0) {
        return Err(Error::InvalidArgument(format!("rho must be nonnegative, got {rho}")));
    }
    if !linalg::is_positive_definite(w11) {
        return Err(Error::NotPositiveDefinite("lasso design matrix".into()));
    }
    let mut beta = init;
    // r = s12 - W11 β, maintained incrementally
    let mut r = s12 - w11 * &beta;
    for _ in 0..LASSO_MAX_ITER {
        let mut max_delta = 0.0_f64;
        for j in 0..k {
            let wjj = w11[(j, j)];
            let old = beta[j];
            let new = soft_threshold(r[j] + wjj * old, rho) / wjj;
            let delta = new - old;
            if delta != 0.0 {
                r.axpy(-delta, &w11.column(j).into_owned(), 1.0);
                beta[j] = new;
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta < LASSO_TOL {
            return Ok(beta);
        }
    }
    Err(Error::NoConvergence { solver: "lasso", iterations: LASSO_MAX_ITER, residual: f64::NAN })
}

fn without(k: usize, j: usize) -> Vec<usize> {
    (0..k).filter(|&i| i != j).collect()
}

/// One full cycle of column updates. `W` and `S` must be symmetric `k x k`.
pub fn glasso_sweep(w: &DMatrix<f64>, s: &DMatrix<f64>, rho: f64) -> Result<DMatrix<f64>> {
    let k = s.nrows();
    if w.shape() != (k, k) || s.ncols() != k {
        return Err(Error::DimensionMismatch { expected: k, got: w.nrows() });
    }
    let mut w = w.clone();
    for j in 0..k {
        w[(j, j)] = s[(j, j)] + rho;
    }
    if k == 1 {
        return Ok(w);
    }
    // Resetting the diagonal can break definiteness of the warm start.
    shrink_until_definite(&mut w, |i, j| i != j);
    for j in 0..k {
        let idx = without(k, j);
        let w11 = linalg::submatrix(&w, &idx);
        let s12 = DVector::from_iterator(k - 1, idx.iter().map(|&i| s[(i, j)]));
        let w12 = DVector::from_iterator(k - 1, idx.iter().map(|&i| w[(i, j)]));
        let warm = linalg::cholesky(&w11)?.solve(&w12);
        let beta = lasso_warm(&w11, &s12, rho, warm)?;
        let new12 = &w11 * beta;
        for (a, &i) in idx.iter().enumerate() {
            w[(i, j)] = new12[a];
            w[(j, i)] = new12[a];
        }
    }
    if !linalg::is_positive_definite(&w) {
        let boost = 1e-6 * w.trace() / k as f64;
        for j in 0..k {
            w[(j, j)] += boost;
        }
        if !linalg::is_positive_definite(&w) {
            return Err(Error::NotPositiveDefinite("covariance estimate after sweep".into()));
        }
    }
    Ok(w)
}

/// Repeated sweeps until `W` changes by less than `tol` entrywise. Returns `W`
/// and the precision `Θ` assembled from the final lasso coefficients, so that
/// zeros in `Θ` are exact.
pub fn graphical_lasso(
    s: &DMatrix<f64>,
    rho: f64,
    max_sweeps: usize,
    tol: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = s.nrows();
    let mut w = s.clone();
    for j in 0..k {
        w[(j, j)] += rho;
    }
    let mut converged = false;
    let mut change = f64::INFINITY;
    for _ in 0..max_sweeps {
        let next = glasso_sweep(&w, s, rho)?;
        change = (&next - &w).amax();
        w = next;
        if change < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { solver: "graphical lasso", iterations: max_sweeps, residual: change });
    }
    let mut theta = DMatrix::zeros(k, k);
    if k == 1 {
        theta[(0, 0)] = 1.0 / w[(0, 0)];
        return Ok((w, theta));
    }
    for j in 0..k {
        let idx = without(k, j);
        let w11 = linalg::submatrix(&w, &idx);
        let s12 = DVector::from_iterator(k - 1, idx.iter().map(|&i| s[(i, j)]));
        let w12 = DVector::from_iterator(k - 1, idx.iter().map(|&i| w[(i, j)]));
        let warm = linalg::cholesky(&w11)?.solve(&w12);
        let beta = lasso_warm(&w11, &s12, rho, warm)?;
        let t22 = 1.0 / (w[(j, j)] - w12.dot(&beta));
        theta[(j, j)] = t22;
        for (a, &i) in idx.iter().enumerate() {
            theta[(i, j)] = -beta[a] * t22;
        }
    }
    let theta = (&theta + theta.transpose()) * 0.5;
    Ok((w, theta))
}

/// Penalized Gaussian log-likelihood `log det Θ − tr(SΘ) − ρ‖Θ‖₁` at `Θ = W⁻¹`.
pub fn penalized_log_likelihood(w: &DMatrix<f64>, s: &DMatrix<f64>, rho: f64) -> Result<f64> {
    let theta = linalg::cholesky(w)?.inverse();
    let logdet = -linalg::log_abs_det(w)?;
    let l1: f64 = theta.iter().map(|v| v.abs()).sum();
    Ok(logdet - (s * &theta).trace() - rho * l1)
}

/// Principal submatrix on the non-intervened indices.
pub fn restrict_to_observed(w: &DMatrix<f64>, target: &VertexSet) -> DMatrix<f64> {
    linalg::submatrix(w, &observed_indices(w.nrows(), target))
}

pub fn observed_indices(d: usize, target: &VertexSet) -> Vec<usize> {
    (0..d).filter(|i| !target.contains(i)).collect()
}

/// Write `block` back onto the non-intervened principal block of `w`.
pub fn write_back(w: &mut DMatrix<f64>, target: &VertexSet, block: &DMatrix<f64>) {
    let idx = observed_indices(w.nrows(), target);
    for (a, &i) in idx.iter().enumerate() {
        for (b, &j) in idx.iter().enumerate() {
            w[(i, j)] = block[(a, b)];
        }
    }
}

/// One sweep on the block `(Σ_Z)_{U,U}` using the sample covariance of `z_U`.
/// A fully intervened regime leaves `w` untouched.
pub fn glasso_update(
    w: &mut DMatrix<f64>,
    target: &VertexSet,
    z_rows: &[DVector<f64>],
    rho: f64,
) -> Result<()> {
    let idx = observed_indices(w.nrows(), target);
    if idx.is_empty() || z_rows.is_empty() {
        return Ok(());
    }
    let sub: Vec<DVector<f64>> = z_rows.iter().map(|z| linalg::subvector(z, &idx)).collect();
    let s = sample_covariance(&sub)?;
    let block = glasso_sweep(&linalg::submatrix(w, &idx), &s, rho)?;
    write_back(w, target, &block);
    // Both diagonal blocks are definite, so the block-diagonal limit is too.
    let inside: Vec<bool> = (0..w.nrows()).map(|i| idx.contains(&i)).collect();
    shrink_until_definite(w, |i, j| inside[i] != inside[j]);
    Ok(())
}

/// Halves the entries selected by `shrink` until `w` is positive definite, zeroing
/// them after a fixed number of attempts.
fn shrink_until_definite(w: &mut DMatrix<f64>, shrink: impl Fn(usize, usize) -> bool) {
    let d = w.nrows();
    for attempt in 0..=30 {
        if linalg::is_positive_definite(w) {
            return;
        }
        let factor = if attempt == 30 { 0.0 } else { 0.5 };
        for i in 0..d {
            for j in 0..d {
                if shrink(i, j) {
                    w[(i, j)] *= factor;
                }
            }
        }
    }
}
