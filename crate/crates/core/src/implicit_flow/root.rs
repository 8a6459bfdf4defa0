//! Root finding for `r(y) = 0` where `y - r(y)` is a contraction.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub picard_max_iter: usize,
    pub picard_damping: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-9,
            max_iter: 200,
            picard_max_iter: 20_000,
            picard_damping: 0.7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub y: DVector<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub used_fallback: bool,
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.amax()
}

/// Good Broyden with an identity initial inverse Jacobian. Falls back to damped
/// Picard iteration `y <- y - α r(y)` from the best iterate when Broyden stalls.
pub fn solve<F>(mut residual: F, y0: DVector<f64>, opts: &SolverOptions) -> Result<Solution>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let n = y0.len();
    let mut y = y0;
    let mut r = residual(&y)?;
    let mut res = inf_norm(&r);
    if n == 0 || res < opts.tol {
        return Ok(Solution { y, residual: res, iterations: 0, used_fallback: false });
    }
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut best = (y.clone(), res);
    let mut since_best = 0;
    for it in 1..=opts.max_iter {
        let step = -(&h * &r);
        let y_new = &y + &step;
        let r_new = residual(&y_new)?;
        let res_new = inf_norm(&r_new);
        if !res_new.is_finite() {
            break;
        }
        if res_new < opts.tol {
            return Ok(Solution { y: y_new, residual: res_new, iterations: it, used_fallback: false });
        }
        let dr = &r_new - &r;
        let h_dr = &h * &dr;
        let denom = step.dot(&h_dr);
        if denom.abs() > 1e-300 {
            let s_h = h.tr_mul(&step);
            h.ger(1.0 / denom, &(&step - &h_dr), &s_h, 1.0);
        }
        y = y_new;
        r = r_new;
        res = res_new;
        if res < best.1 {
            best = (y.clone(), res);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= 20 {
                break;
            }
        }
    }
    picard(&mut residual, best.0, opts, opts.max_iter)
}

fn picard<F>(residual: &mut F, mut y: DVector<f64>, opts: &SolverOptions, done: usize) -> Result<Solution>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut res = f64::INFINITY;
    for it in 0..opts.picard_max_iter {
        let r = residual(&y)?;
        res = inf_norm(&r);
        if res < opts.tol {
            return Ok(Solution { y, residual: res, iterations: done + it, used_fallback: true });
        }
        if !res.is_finite() {
            break;
        }
        y.axpy(-opts.picard_damping, &r, 1.0);
    }
    Err(Error::NoConvergence {
        solver: "broyden/picard",
        iterations: done + opts.picard_max_iter,
        residual: res,
    })
}
