//! Exact and stochastic log-determinants of the flow Jacobian.
//!
//! `log|det J_f(x)| = log det(I + U J_gx(x)) - log det(I + U J_gz(z))`. The stochastic
//! estimator expands each term as `Σ_m (-1)^{m+1}/m tr((U J)^m)`, truncates at a random
//! `n` reweighted by tail probabilities, and estimates traces with probe vectors.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Geometric, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FlowModel, RegimeContext};
use crate::error::{Error, Result};
use crate::linalg;

/// Hard cap on the number of series terms.
pub const MAX_SERIES_TERMS: usize = 50;

/// Law of the random truncation point, supported on `{1, 2, ...}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum TruncationDistribution {
    /// `1 + Poisson(rate)`.
    Poisson { rate: f64 },
    /// Number of trials up to the first success with probability `p`.
    Geometric { p: f64 },
}

impl Default for TruncationDistribution {
    fn default() -> Self {
        TruncationDistribution::Poisson { rate: 2.0 }
    }
}

impl TruncationDistribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TruncationDistribution::Poisson { rate } if rate > 0.0 && rate.is_finite() => Ok(()),
            TruncationDistribution::Geometric { p } if p > 0.0 && p < 1.0 => Ok(()),
            other => Err(Error::InvalidArgument(format!("invalid truncation law {other:?}"))),
        }
    }

    /// `P(N >= m)`.
    pub fn tail(&self, m: usize) -> f64 {
        if m <= 1 {
            return 1.0;
        }
        match *self {
            TruncationDistribution::Geometric { p } => (1.0 - p).powi(m as i32 - 1),
            TruncationDistribution::Poisson { rate } => {
                // P(K >= m - 1) for K ~ Poisson(rate), summed upward to avoid cancellation
                let k0 = m - 1;
                let mut log_pmf = -rate + k0 as f64 * rate.ln() - ln_factorial(k0);
                let mut sum = 0.0;
                let mut k = k0;
                loop {
                    let term = log_pmf.exp();
                    sum += term;
                    k += 1;
                    log_pmf += rate.ln() - (k as f64).ln();
                    if (k as f64) > rate && term < sum * 1e-17 {
                        break;
                    }
                    if k > k0 + 10_000 {
                        break;
                    }
                }
                sum.min(1.0)
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match *self {
            TruncationDistribution::Poisson { rate } => {
                let k: f64 = Poisson::new(rate).expect("validated rate").sample(rng);
                1 + k as usize
            }
            TruncationDistribution::Geometric { p } => {
                let k = Geometric::new(p).expect("validated p").sample(rng);
                1 + k.min(usize::MAX as u64 - 1) as usize
            }
        }
    }
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    #[default]
    Rademacher,
    Gaussian,
}

impl ProbeKind {
    pub fn draw<R: Rng + ?Sized>(&self, d: usize, rng: &mut R) -> DVector<f64> {
        match self {
            ProbeKind::Rademacher => DVector::from_fn(d, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 }),
            ProbeKind::Gaussian => DVector::from_fn(d, |_, _| rng.sample(StandardNormal)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogDetEstimator {
    pub truncation: TruncationDistribution,
    pub n_probe: usize,
    pub probe: ProbeKind,
}

impl Default for LogDetEstimator {
    fn default() -> Self {
        LogDetEstimator {
            truncation: TruncationDistribution::default(),
            n_probe: 1,
            probe: ProbeKind::Rademacher,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LogDetMode {
    Exact,
    Stochastic(LogDetEstimator),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Side {
    X,
    Z,
}

impl LogDetEstimator {
    /// Truncation point clamped to the term cap, with its tail weights `1/P(N >= k)` for `k = 0..=n`.
    pub(crate) fn draw_truncation<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(usize, Vec<f64>)> {
        self.truncation.validate()?;
        if self.n_probe == 0 {
            return Err(Error::InvalidArgument("n_probe must be positive".into()));
        }
        let n = self.truncation.sample(rng).min(MAX_SERIES_TERMS);
        let mut inv = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let t = self.truncation.tail(k);
            if !(t >= f64::MIN_POSITIVE) {
                return Err(Error::InvalidArgument(format!("tail probability underflows at term {k}")));
            }
            inv.push(1.0 / t);
        }
        Ok((n, inv))
    }
}

impl FlowModel {
    /// `u_k = ((U J)ᵀ)^k v` for `k = 0..=n`, by repeated vector-Jacobian products.
    pub(crate) fn transposed_powers(
        &self,
        side: Side,
        mask: &DMatrix<f64>,
        ctx: &RegimeContext,
        at: &DVector<f64>,
        v: &DVector<f64>,
        n: usize,
    ) -> Result<Vec<DVector<f64>>> {
        let eye = DMatrix::identity(0, 0);
        let mut out = Vec::with_capacity(n + 1);
        out.push(v.clone());
        for k in 0..n {
            let uu = ctx.apply_u(&out[k]);
            let next = match side {
                Side::X => self.gx_vjp(mask, at, &uu)?,
                Side::Z => self.g_z.vjp(&eye, at, &uu)?,
            };
            out.push(next);
        }
        Ok(out)
    }

    /// Exact `log|det J_f(x)|` from dense Jacobians.
    pub fn logdet_exact(&self, mask: &DMatrix<f64>, ctx: &RegimeContext, x: &DVector<f64>) -> Result<f64> {
        let z = self.forward_map(mask, ctx, x)?;
        self.logdet_exact_at(mask, ctx, x, &z)
    }

    pub(crate) fn logdet_exact_at(
        &self,
        mask: &DMatrix<f64>,
        ctx: &RegimeContext,
        x: &DVector<f64>,
        z: &DVector<f64>,
    ) -> Result<f64> {
        if ctx.observed.is_empty() {
            return Ok(0.0);
        }
        let jx = restricted_identity_plus(&self.gx_jacobian(mask, x)?, &ctx.observed);
        let jz = restricted_identity_plus(&self.gz_jacobian(z)?, &ctx.observed);
        Ok(linalg::log_abs_det(&jx)? - linalg::log_abs_det(&jz)?)
    }

    /// Single-draw unbiased estimate of `log|det J_f(x)|`.
    pub fn logdet_estimate<R: Rng + ?Sized>(
        &self,
        mask: &DMatrix<f64>,
        ctx: &RegimeContext,
        x: &DVector<f64>,
        est: &LogDetEstimator,
        rng: &mut R,
    ) -> Result<f64> {
        let z = self.forward_map(mask, ctx, x)?;
        self.logdet_estimate_at(mask, ctx, x, &z, est, rng)
    }

    pub(crate) fn logdet_estimate_at<R: Rng + ?Sized>(
        &self,
        mask: &DMatrix<f64>,
        ctx: &RegimeContext,
        x: &DVector<f64>,
        z: &DVector<f64>,
        est: &LogDetEstimator,
        rng: &mut R,
    ) -> Result<f64> {
        let (n, inv_tail) = est.draw_truncation(rng)?;
        let mut total = 0.0;
        for _ in 0..est.n_probe {
            let v = est.probe.draw(self.dim(), rng);
            let px = self.transposed_powers(Side::X, mask, ctx, x, &v, n)?;
            let pz = self.transposed_powers(Side::Z, mask, ctx, z, &v, n)?;
            total += series_value(&px, &pz, &v, &inv_tail);
        }
        Ok(total / est.n_probe as f64)
    }
}

/// `Σ_{m=1}^n (-1)^{m+1}/m · vᵀ(A^m - B^m)v / P(N >= m)`.
pub(crate) fn series_value(px: &[DVector<f64>], pz: &[DVector<f64>], v: &DVector<f64>, inv_tail: &[f64]) -> f64 {
    let mut acc = 0.0;
    for m in 1..px.len() {
        let sign = if m % 2 == 1 { 1.0 } else { -1.0 };
        acc += sign / m as f64 * (px[m].dot(v) - pz[m].dot(v)) * inv_tail[m];
    }
    acc
}

/// `I + J` restricted to rows and columns in `idx`.
fn restricted_identity_plus(j: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    let mut m = linalg::submatrix(j, idx);
    for a in 0..idx.len() {
        m[(a, a)] += 1.0;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::super::tests::{random_model, set};
    use super::super::*;
    use super::*;
    use crate::nnet::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn direct_tail(t: &TruncationDistribution, m: usize, terms: usize) -> f64 {
        // P(N >= m) = 1 - Σ_{k<m} P(N = k) by explicit pmf, for moderate m
        let pmf = |k: usize| -> f64 {
            match *t {
                TruncationDistribution::Poisson { rate } => {
                    if k == 0 {
                        return 0.0;
                    }
                    let j = k - 1;
                    (-rate + j as f64 * rate.ln() - ln_factorial(j)).exp()
                }
                TruncationDistribution::Geometric { p } => {
                    if k == 0 {
                        0.0
                    } else {
                        p * (1.0 - p).powi(k as i32 - 1)
                    }
                }
            }
        };
        (m..terms).map(pmf).sum()
    }

    #[test]
    fn tail_probabilities() {
        for t in [
            TruncationDistribution::Poisson { rate: 2.0 },
            TruncationDistribution::Poisson { rate: 0.5 },
            TruncationDistribution::Geometric { p: 0.5 },
        ] {
            assert_eq!(t.tail(0), 1.0);
            assert_eq!(t.tail(1), 1.0);
            for m in 2..30 {
                let want = direct_tail(&t, m, 400);
                assert!((t.tail(m) - want).abs() <= 1e-12 * want.max(1e-300) + 1e-300);
            }
            assert!(t.tail(MAX_SERIES_TERMS) > 0.0);
        }
        let t = TruncationDistribution::Poisson { rate: 2.0 };
        // P(K >= 1) and P(K >= 2) for K ~ Poisson(2)
        assert!((t.tail(2) - (1.0 - (-2.0_f64).exp())).abs() < 1e-15);
        assert!((t.tail(3) - (1.0 - 3.0 * (-2.0_f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn truncation_samples_match_tails() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in [TruncationDistribution::Poisson { rate: 2.0 }, TruncationDistribution::Geometric { p: 0.4 }] {
            let n = 100_000;
            let draws: Vec<usize> = (0..n).map(|_| t.sample(&mut rng)).collect();
            assert!(draws.iter().all(|&k| k >= 1));
            for m in 2..6 {
                let p = t.tail(m);
                let freq = draws.iter().filter(|&&k| k >= m).count() as f64 / n as f64;
                assert!((freq - p).abs() < 4.0 * (p * (1.0 - p) / n as f64).sqrt());
            }
        }
    }

    #[test]
    fn zero_flow_and_full_intervention_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let zero = FlowModel::from_linear_sem(&DMatrix::zeros(3, 3), &DMatrix::identity(3, 3), 1.0);
        let mask = DMatrix::from_element(3, 3, 1.0);
        let ctx = RegimeContext::new(&zero, &set(&[])).unwrap();
        let x = DVector::from_vec(vec![0.2, 0.4, -1.0]);
        let est = LogDetEstimator::default();
        assert_eq!(zero.logdet_exact(&mask, &ctx, &x).unwrap(), 0.0);
        for _ in 0..20 {
            assert_eq!(zero.logdet_estimate(&mask, &ctx, &x, &est, &mut rng).unwrap(), 0.0);
        }
        let (m, mask) = random_model(3, Activation::Tanh, 3);
        let full = RegimeContext::new(&m, &set(&[0, 1, 2])).unwrap();
        assert_eq!(m.logdet_exact(&mask, &full, &x).unwrap(), 0.0);
        for _ in 0..20 {
            assert_eq!(m.logdet_estimate(&mask, &full, &x, &est, &mut rng).unwrap(), 0.0);
        }
    }

    #[test]
    fn exact_linear_matches_dense_determinant() {
        let a = DMatrix::from_row_slice(3, 3, &[0.0, 0.3, -0.2, 0.1, 0.0, 0.4, -0.3, 0.2, 0.0]);
        // g_x(x) = A x corresponds to weights W = -Aᵀ
        let m = FlowModel::from_linear_sem(&(-a.transpose()), &DMatrix::identity(3, 3), 1.0);
        let mask = DMatrix::from_fn(3, 3, |j, i| if i != j { 1.0 } else { 0.0 });
        let ctx = RegimeContext::new(&m, &set(&[])).unwrap();
        let x = DVector::from_vec(vec![0.3, -0.1, 0.8]);
        let want = (DMatrix::identity(3, 3) + &a).determinant().abs().ln();
        assert!((m.logdet_exact(&mask, &ctx, &x).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn estimator_is_unbiased_for_tanh_model() {
        let (m, mask) = random_model(4, Activation::Tanh, 17);
        let ctx = RegimeContext::new(&m, &set(&[1])).unwrap();
        let x = DVector::from_vec(vec![0.3, -1.0, 0.5, 1.2]);
        let exact = m.logdet_exact(&mask, &ctx, &x).unwrap();
        let z = m.forward_map(&mask, &ctx, &x).unwrap();
        for (seed, est) in [
            LogDetEstimator::default(),
            LogDetEstimator {
                truncation: TruncationDistribution::Geometric { p: 0.5 },
                n_probe: 2,
                probe: ProbeKind::Gaussian,
            },
        ]
        .into_iter()
        .enumerate()
        {
            let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
            let n = 20_000;
            let s: Vec<f64> = (0..n)
                .map(|_| m.logdet_estimate_at(&mask, &ctx, &x, &z, &est, &mut rng).unwrap())
                .collect();
            let mean = s.iter().sum::<f64>() / n as f64;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!((mean - exact).abs() < 3.5 * se, "mean {mean} exact {exact} se {se}");
        }
    }
}
