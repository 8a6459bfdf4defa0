use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Largest singular value, computed from the full SVD.
pub fn spectral_norm_exact(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Power iteration on `mᵀm`. Stops when the relative change drops below `tol`
/// or after `max_iter` rounds; restarts once from `restart` if the iterate collapses.
pub fn spectral_norm_power(m: &DMatrix<f64>, tol: f64, max_iter: usize, restart: &[f64]) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let n = m.ncols();
    let start = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let first = power_from(m, start, tol, max_iter);
    match first {
        Some(s) => s,
        None => {
            let v = DVector::from_iterator(n, (0..n).map(|i| restart[i % restart.len()]));
            power_from(m, v, tol, max_iter).unwrap_or(0.0)
        }
    }
}

fn power_from(m: &DMatrix<f64>, mut v: DVector<f64>, tol: f64, max_iter: usize) -> Option<f64> {
    let mut sigma = 0.0;
    for _ in 0..max_iter {
        let norm = v.norm();
        if norm < 1e-300 {
            return None;
        }
        v /= norm;
        let mv = m * &v;
        let next = mv.norm();
        v = m.transpose() * mv;
        if next == 0.0 {
            return None;
        }
        let done = (next - sigma).abs() <= tol * next;
        sigma = next;
        if done {
            break;
        }
    }
    Some(sigma)
}

pub fn cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| {
        Error::NotPositiveDefinite(format!("{}x{} matrix failed Cholesky", m.nrows(), m.ncols()))
    })
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.nrows() == m.ncols() && Cholesky::new(m.clone()).is_some()
}

/// `log |det m|` by LU with partial pivoting.
pub fn log_abs_det(m: &DMatrix<f64>) -> Result<f64> {
    if m.is_empty() {
        return Ok(0.0);
    }
    let lu = m.clone().lu();
    let u = lu.u();
    let mut acc = 0.0;
    for i in 0..u.nrows() {
        let p = u[(i, i)].abs();
        if p == 0.0 || !p.is_finite() {
            return Err(Error::Singular(format!("zero pivot at row {i}")));
        }
        acc += p.ln();
    }
    Ok(acc)
}

/// Zero-mean multivariate normal log-density; an empty vector has density 1.
pub fn gaussian_log_density(z: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let k = z.len();
    if k == 0 {
        return Ok(0.0);
    }
    let chol = cholesky(cov)?;
    let sol = chol.solve(z);
    let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (z.dot(&sol) + logdet + k as f64 * LN_2PI))
}

pub fn submatrix(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |a, b| m[(idx[a], idx[b])])
}

pub fn subvector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_iteration_matches_svd() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -0.5, 0.3, 4.0, -1.0]);
        let exact = spectral_norm_exact(&m);
        let approx = spectral_norm_power(&m, 1e-10, 500, &[0.3, -0.7]);
        assert!((exact - approx).abs() < 1e-8 * exact);
        assert_eq!(spectral_norm_power(&DMatrix::zeros(2, 2), 1e-6, 50, &[1.0]), 0.0);
    }

    #[test]
    fn gaussian_density_standard() {
        let z = DVector::from_vec(vec![0.5, -1.0]);
        let got = gaussian_log_density(&z, &DMatrix::identity(2, 2)).unwrap();
        let want = -LN_2PI - 0.5 * (0.25 + 1.0);
        assert!((got - want).abs() < 1e-12);
        assert!(gaussian_log_density(&z, &DMatrix::from_element(2, 2, 1.0)).is_err());
    }

    #[test]
    fn log_det_known() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, -3.0]);
        assert!((log_abs_det(&m).unwrap() - 7.0_f64.ln()).abs() < 1e-12);
        assert!(log_abs_det(&DMatrix::zeros(2, 2)).is_err());
    }
}
