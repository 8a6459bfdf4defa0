//! Straight-through Gumbel-sigmoid sampling of adjacency matrices.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::implicit_flow::sigmoid;

/// One adjacency draw. `hard` is used in the forward pass; gradients flow through `soft`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencySample {
    pub hard: DMatrix<f64>,
    pub soft: DMatrix<f64>,
    pub temperature: f64,
}

impl AdjacencySample {
    /// Chain rule from mask gradients to logit gradients, `∂B = ∂M · s(1 - s)/τ`.
    pub fn logit_gradient(&self, mask_grad: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.soft.nrows();
        DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                0.0
            } else {
                let s = self.soft[(i, j)];
                mask_grad[(i, j)] * s * (1.0 - s) / self.temperature
            }
        })
    }

    /// Sum of off-diagonal soft entries.
    pub fn soft_l1(&self) -> f64 {
        let d = self.soft.nrows();
        (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| self.soft[(i, j)])
            .sum()
    }
}

/// Logistic noise `L = log u − log(1 − u)` shared by both masks:
/// `hard = 1[B + L > 0]` and `soft = σ((B + L)/τ)`. The diagonal is always zero.
pub fn sample_adjacency<R: Rng + ?Sized>(logits: &DMatrix<f64>, temperature: f64, rng: &mut R) -> Result<AdjacencySample> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let d = logits.nrows();
    let noise = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            0.0
        } else {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            u.ln() - (-u).ln_1p()
        }
    });
    Ok(from_noise(logits, &noise, temperature))
}

pub fn from_noise(logits: &DMatrix<f64>, noise: &DMatrix<f64>, temperature: f64) -> AdjacencySample {
    let d = logits.nrows();
    let mut hard = DMatrix::zeros(d, d);
    let mut soft = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            if i != j {
                let a = logits[(i, j)] + noise[(i, j)];
                hard[(i, j)] = if a > 0.0 { 1.0 } else { 0.0 };
                soft[(i, j)] = sigmoid(a / temperature);
            }
        }
    }
    AdjacencySample { hard, soft, temperature }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn saturated_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = DMatrix::from_element(3, 3, 40.0);
        b[(0, 1)] = -40.0;
        for _ in 0..1000 {
            let s = sample_adjacency(&b, 1.0, &mut rng).unwrap();
            assert_eq!(s.hard[(0, 1)], 0.0);
            assert_eq!(s.hard[(1, 0)], 1.0);
            for i in 0..3 {
                assert_eq!(s.hard[(i, i)], 0.0);
                assert_eq!(s.soft[(i, i)], 0.0);
            }
        }
        assert!(sample_adjacency(&b, 0.0, &mut rng).is_err());
    }

    #[test]
    fn zero_logits_give_fair_coin() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = DMatrix::zeros(2, 2);
        let n = 100_000;
        let hits: f64 = (0..n).map(|_| sample_adjacency(&b, 1.0, &mut rng).unwrap().hard[(0, 1)]).sum();
        let se = (0.25 / n as f64).sqrt();
        assert!((hits / n as f64 - 0.5).abs() < 3.0 * se);
    }

    #[test]
    fn soft_approaches_hard_as_temperature_falls() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = DMatrix::from_fn(4, 4, |i, j| (i as f64 - j as f64) * 0.7);
        let noise = DMatrix::from_fn(4, 4, |_, _| {
            let u: f64 = rng.random_range(0.01..0.99);
            u.ln() - (-u).ln_1p()
        });
        let mut prev = f64::INFINITY;
        for t in [1.0, 0.1, 0.01, 0.001] {
            let s = from_noise(&b, &noise, t);
            let gap = (&s.soft - &s.hard).amax();
            assert!(gap <= prev);
            prev = gap;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn logit_gradient_chain_rule() {
        let b = DMatrix::from_row_slice(2, 2, &[0.0, 0.3, -0.2, 0.0]);
        let noise = DMatrix::from_row_slice(2, 2, &[0.0, 0.1, 0.4, 0.0]);
        let t = 0.5;
        let g = DMatrix::from_row_slice(2, 2, &[5.0, 2.0, -1.0, 5.0]);
        let s = from_noise(&b, &noise, t);
        let got = s.logit_gradient(&g);
        let h = 1e-6;
        for (i, j) in [(0, 1), (1, 0)] {
            let mut bp = b.clone();
            bp[(i, j)] += h;
            let mut bm = b.clone();
            bm[(i, j)] -= h;
            let fd = (from_noise(&bp, &noise, t).soft - from_noise(&bm, &noise, t).soft)[(i, j)] / (2.0 * h) * g[(i, j)];
            assert!((fd - got[(i, j)]).abs() < 1e-8);
        }
        assert_eq!(got[(0, 0)], 0.0);
    }
}
