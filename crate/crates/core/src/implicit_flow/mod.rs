//! Implicit flow `x = U F(x, z) + c` with `F(x, z) = -g_x(x) + g_z(z) + z`.
//!
//! `U` zeroes the intervened coordinates. The forward map recovers exogenous noise
//! `z` from observations by solving `z + U g_z(z) = x + U g_x(x)`; the reverse map
//! solves `x + U g_x(x) = U (z + g_z(z)) + c`.

mod grad;
mod logdet;
pub mod root;

pub use grad::{FlowGrads, SampleEval};
pub use logdet::{LogDetEstimator, LogDetMode, ProbeKind, TruncationDistribution, MAX_SERIES_TERMS};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graphs::{DirectedMixedGraph, VertexSet};
use crate::linalg;
use crate::nnet::{Activation, Dense, DualGrads, MaskMode, MaskedMlp};
use root::SolverOptions;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub g_x: MaskedMlp,
    pub g_z: MaskedMlp,
    /// Edge logits `B`; `σ(B[j, i])` is the probability of `j -> i`.
    pub edge_logits: DMatrix<f64>,
    pub sigma_z: DMatrix<f64>,
    /// Diagonal preconditioner `Λ`; `g_x` is evaluated as `Λ⁻¹ g_x(Λ x)`.
    pub precondition: Option<DVector<f64>>,
    /// Standard deviation of the Gaussian values used by hard interventions.
    pub intervention_std: f64,
    pub solver: SolverOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowArchitecture {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lipschitz_cap: f64,
}

impl Default for FlowArchitecture {
    fn default() -> Self {
        FlowArchitecture {
            hidden: vec![16],
            activation: Activation::Tanh,
            lipschitz_cap: 0.9,
        }
    }
}

/// Precomputed quantities for evaluating samples of one regime.
#[derive(Debug, Clone)]
pub struct RegimeContext {
    pub target: VertexSet,
    /// `keep[i]` is true when `i` is not intervened on.
    pub keep: Vec<bool>,
    pub observed: Vec<usize>,
    chol: Option<Cholesky<f64, Dyn>>,
    log_norm: f64,
}

impl RegimeContext {
    pub fn new(model: &FlowModel, target: &VertexSet) -> Result<Self> {
        let d = model.dim();
        if let Some(&t) = target.iter().next_back() {
            if t >= d {
                return Err(Error::InvalidArgument(format!("target {t} out of range for d={d}")));
            }
        }
        let keep: Vec<bool> = (0..d).map(|i| !target.contains(&i)).collect();
        let observed: Vec<usize> = (0..d).filter(|&i| keep[i]).collect();
        let (chol, log_norm) = if observed.is_empty() {
            (None, 0.0)
        } else {
            let block = linalg::submatrix(&model.sigma_z, &observed);
            let c = linalg::cholesky(&block)?;
            let logdet: f64 = 2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let ln = -0.5 * (logdet + observed.len() as f64 * linalg::LN_2PI);
            (Some(c), ln)
        };
        Ok(RegimeContext {
            target: target.clone(),
            keep,
            observed,
            chol,
            log_norm,
        })
    }

    pub fn apply_u(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(v.len(), |i, _| if self.keep[i] { v[i] } else { 0.0 })
    }

    /// Log-density of `z_U` under `N(0, Σ_UU)` and its gradient embedded in `R^d`.
    pub fn noise_log_density(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        let mut grad = DVector::zeros(z.len());
        let Some(chol) = &self.chol else {
            return (0.0, grad);
        };
        let zu = linalg::subvector(z, &self.observed);
        let sol = chol.solve(&zu);
        for (a, &i) in self.observed.iter().enumerate() {
            grad[i] = -sol[a];
        }
        (self.log_norm - 0.5 * zu.dot(&sol), grad)
    }

    /// Log-density of the intervention values on the intervened coordinates.
    pub fn intervention_log_density(&self, x: &DVector<f64>, std: f64) -> f64 {
        let var = std * std;
        self.target
            .iter()
            .map(|&i| -0.5 * (x[i] * x[i] / var + var.ln() + linalg::LN_2PI))
            .sum()
    }
}

/// Adjacency matrix as a real mask: `mask[(j, i)] = 1` iff `j -> i`.
pub fn mask_from_graph(g: &DirectedMixedGraph) -> DMatrix<f64> {
    let d = g.num_vertices();
    DMatrix::from_fn(d, d, |j, i| if g.has_directed(j, i) { 1.0 } else { 0.0 })
}

pub fn mask_from_bool(d: usize, m: &[bool]) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |j, i| if m[j * d + i] { 1.0 } else { 0.0 })
}

impl FlowModel {
    pub fn new<R: Rng + ?Sized>(d: usize, arch: &FlowArchitecture, rng: &mut R) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        let mut widths = vec![d];
        widths.extend(&arch.hidden);
        widths.push(d);
        let g_x = MaskedMlp::new(&widths, arch.activation, MaskMode::ColumnOfM, arch.lipschitz_cap, rng)?;
        let g_z = MaskedMlp::new(&widths, arch.activation, MaskMode::Identity, arch.lipschitz_cap, rng)?;
        Ok(FlowModel {
            g_x,
            g_z,
            edge_logits: DMatrix::zeros(d, d),
            sigma_z: DMatrix::identity(d, d),
            precondition: None,
            intervention_std: 1.0,
            solver: SolverOptions::default(),
        })
    }

    /// Exact flow of a linear SEM `x = Wᵀ x + z`: `g_x(x) = -Wᵀ x`, `g_z = 0`.
    pub fn from_linear_sem(weights: &DMatrix<f64>, sigma_z: &DMatrix<f64>, intervention_std: f64) -> Self {
        let d = weights.nrows();
        let g_x = MaskedMlp {
            layers: vec![
                Dense { weight: DMatrix::identity(d, d), bias: DVector::zeros(d) },
                Dense { weight: -weights.transpose(), bias: DVector::zeros(d) },
            ],
            activation: Activation::Identity,
            mask_mode: MaskMode::ColumnOfM,
            lipschitz_cap: 1.0,
        };
        let g_z = MaskedMlp::zeros(&[d, d], Activation::Identity, MaskMode::Identity, 1.0);
        FlowModel {
            g_x,
            g_z,
            edge_logits: DMatrix::from_fn(d, d, |j, i| if weights[(j, i)] != 0.0 { 40.0 } else { -40.0 }),
            sigma_z: sigma_z.clone(),
            precondition: None,
            intervention_std,
            solver: SolverOptions::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.g_x.dim()
    }

    /// Most likely adjacency: `σ(B) > 0.5`, diagonal excluded.
    pub fn mode_mask(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |j, i| if i != j && self.edge_logits[(j, i)] > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn edge_probabilities(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |j, i| if i == j { 0.0 } else { sigmoid(self.edge_logits[(j, i)]) })
    }

    /// Install `Λ`; a zero entry is rejected.
    pub fn precondition(mut self, lambda: DVector<f64>) -> Result<Self> {
        if lambda.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: lambda.len() });
        }
        if lambda.iter().any(|&v| v == 0.0 || !v.is_finite()) {
            return Err(Error::InvalidArgument("preconditioner entries must be finite and nonzero".into()));
        }
        self.precondition = Some(lambda);
        Ok(self)
    }

    /// Re-impose the Lipschitz budget on both networks.
    pub fn spectral_normalize(&mut self) {
        self.g_x.spectral_normalize();
        self.g_z.spectral_normalize();
    }

    // ---- effective g_x, including the preconditioner ----

    pub fn gx(&self, mask: &DMatrix<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.precondition {
            None => self.g_x.forward(mask, x),
            Some(l) => Ok(self.g_x.forward(mask, &x.component_mul(l))?.component_div(l)),
        }
    }

    pub fn gx_jvp(&self, mask: &DMatrix<f64>, x: &DVector<f64>, v: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        match &self.precondition {
            None => self.g_x.jvp(mask, x, v),
            Some(l) => {
                let (g, t) = self.g_x.jvp(mask, &x.component_mul(l), &v.component_mul(l))?;
                Ok((g.component_div(l), t.component_div(l)))
            }
        }
    }

    pub fn gx_vjp(&self, mask: &DMatrix<f64>, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.precondition {
            None => self.g_x.vjp(mask, x, u),
            Some(l) => Ok(self.g_x.vjp(mask, &x.component_mul(l), &u.component_div(l))?.component_mul(l)),
        }
    }

    /// Dual reverse pass through the effective `g_x`; the second value is the gradient
    /// with respect to `Λ` when a preconditioner is installed.
    pub fn gx_backward_dual(
        &self,
        mask: &DMatrix<f64>,
        x: &DVector<f64>,
        v: &DVector<f64>,
        alpha: &DVector<f64>,
        beta: &DVector<f64>,
    ) -> Result<(DualGrads, Option<DVector<f64>>)> {
        let Some(l) = &self.precondition else {
            return Ok((self.g_x.backward_dual(mask, x, v, alpha, beta)?, None));
        };
        let y = x.component_mul(l);
        let w = v.component_mul(l);
        let a = alpha.component_div(l);
        let b = beta.component_div(l);
        let mut g = self.g_x.backward_dual(mask, &y, &w, &a, &b)?;
        let (val, tan) = self.g_x.jvp(mask, &y, &w)?;
        let d = x.len();
        let gl = DVector::from_fn(d, |i, _| {
            g.x[i] * x[i] + g.v[i] * v[i] - (a[i] * val[i] + b[i] * tan[i]) / l[i]
        });
        g.x.component_mul_assign(l);
        g.v.component_mul_assign(l);
        Ok((g, Some(gl)))
    }

    fn check_input(&self, mask: &DMatrix<f64>, v: &DVector<f64>) -> Result<()> {
        let d = self.dim();
        if v.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: v.len() });
        }
        if mask.shape() != (d, d) {
            return Err(Error::DimensionMismatch { expected: d, got: mask.nrows() });
        }
        Ok(())
    }

    /// Noise `z` solving `z + U g_z(z) = x + U g_x(x)`; intervened coordinates copy `x`.
    pub fn forward_map(&self, mask: &DMatrix<f64>, ctx: &RegimeContext, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(mask, x)?;
        let rhs = x + ctx.apply_u(&self.gx(mask, x)?);
        let eye = DMatrix::identity(0, 0);
        let obs = &ctx.observed;
        let mut z = x.clone();
        let y0 = linalg::subvector(&rhs, obs);
        let sol = root::solve(
            |y| {
                let zz = embed(&z, obs, y);
                let r = &zz + self.g_z.forward(&eye, &zz)? - &rhs;
                Ok(linalg::subvector(&r, obs))
            },
            y0,
            &self.solver,
        )?;
        for (a, &i) in obs.iter().enumerate() {
            z[i] = sol.y[a];
        }
        Ok(z)
    }

    /// Observations `x` solving `x + U g_x(x) = U (z + g_z(z)) + c`. Intervened
    /// coordinates equal `c` exactly; `c` is ignored elsewhere.
    pub fn reverse_map(
        &self,
        mask: &DMatrix<f64>,
        ctx: &RegimeContext,
        z: &DVector<f64>,
        c: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check_input(mask, z)?;
        self.check_input(mask, c)?;
        let eye = DMatrix::identity(0, 0);
        let rhs = z + self.g_z.forward(&eye, z)?;
        let obs = &ctx.observed;
        let mut x = DVector::from_fn(z.len(), |i, _| if ctx.keep[i] { 0.0 } else { c[i] });
        let y0 = linalg::subvector(&rhs, obs);
        let sol = root::solve(
            |y| {
                let xx = embed(&x, obs, y);
                let r = &xx + self.gx(mask, &xx)? - &rhs;
                Ok(linalg::subvector(&r, obs))
            },
            y0,
            &self.solver,
        )?;
        for (a, &i) in obs.iter().enumerate() {
            x[i] = sol.y[a];
        }
        Ok(x)
    }

    /// Dense `J_{g_x}(x)` of the effective map.
    pub fn gx_jacobian(&self, mask: &DMatrix<f64>, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let mut jac = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut e = DVector::zeros(d);
            e[j] = 1.0;
            jac.set_column(j, &self.gx_jvp(mask, x, &e)?.1);
        }
        Ok(jac)
    }

    pub fn gz_jacobian(&self, z: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.g_z.jacobian(&DMatrix::identity(0, 0), z)
    }

    /// `log p(x)` for the regime, given a value (exact or estimated) of the log-det term.
    pub fn log_density(&self, mask: &DMatrix<f64>, ctx: &RegimeContext, x: &DVector<f64>, logdet: f64) -> Result<f64> {
        let z = self.forward_map(mask, ctx, x)?;
        Ok(self.log_density_at(ctx, x, &z, logdet))
    }

    pub(crate) fn log_density_at(&self, ctx: &RegimeContext, x: &DVector<f64>, z: &DVector<f64>, logdet: f64) -> f64 {
        ctx.intervention_log_density(x, self.intervention_std) + ctx.noise_log_density(z).0 + logdet
    }

    /// Log-density with the exact log-det term.
    pub fn log_density_exact(&self, mask: &DMatrix<f64>, ctx: &RegimeContext, x: &DVector<f64>) -> Result<f64> {
        let z = self.forward_map(mask, ctx, x)?;
        let ld = self.logdet_exact_at(mask, ctx, x, &z)?;
        Ok(self.log_density_at(ctx, x, &z, ld))
    }
}

fn embed(base: &DVector<f64>, idx: &[usize], vals: &DVector<f64>) -> DVector<f64> {
    let mut out = base.clone();
    for (a, &i) in idx.iter().enumerate() {
        out[i] = vals[a];
    }
    out
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::sem_sim;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn set(v: &[usize]) -> VertexSet {
        v.iter().copied().collect()
    }

    pub(crate) fn random_model(d: usize, act: Activation, seed: u64) -> (FlowModel, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = FlowArchitecture { hidden: vec![6], activation: act, lipschitz_cap: 0.9 };
        let mut m = FlowModel::new(d, &arch, &mut rng).unwrap();
        for net in [&mut m.g_x, &mut m.g_z] {
            let p: Vec<f64> = (0..net.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
            net.set_params(&p).unwrap();
            net.spectral_normalize();
        }
        let mask = DMatrix::from_fn(d, d, |j, i| if i != j && rng.random::<f64>() < 0.6 { 1.0 } else { 0.0 });
        (m, mask)
    }

    pub(crate) fn random_target(d: usize, rng: &mut ChaCha8Rng) -> VertexSet {
        (0..d).filter(|_| rng.random::<f64>() < 0.3).collect()
    }

    fn rand_vec(d: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0))
    }

    fn zero_model(d: usize) -> FlowModel {
        let mut m = FlowModel::from_linear_sem(&DMatrix::zeros(d, d), &DMatrix::identity(d, d), 1.0);
        m.edge_logits.fill(0.0);
        m
    }

    #[test]
    fn zero_flow_is_identity() {
        let m = zero_model(4);
        let ctx = RegimeContext::new(&m, &set(&[])).unwrap();
        let mask = DMatrix::from_element(4, 4, 1.0);
        let x = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.1]);
        assert_eq!(m.forward_map(&mask, &ctx, &x).unwrap(), x);
        assert_eq!(m.reverse_map(&mask, &ctx, &x, &DVector::zeros(4)).unwrap(), x);
    }

    #[test]
    fn linear_forward_matches_dense_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = DirectedMixedGraph::from_edges(4, &[(0, 1), (1, 2), (2, 3), (3, 1)], &[]).unwrap();
        let w = sem_sim::make_contractive(&sem_sim::sample_weights(&g, &mut rng), 0.8);
        let m = FlowModel::from_linear_sem(&w, &DMatrix::identity(4, 4), 1.0);
        let mask = mask_from_graph(&g);
        let ctx = RegimeContext::new(&m, &set(&[])).unwrap();
        let x = rand_vec(4, &mut rng);
        let z = m.forward_map(&mask, &ctx, &x).unwrap();
        let want = &x - w.transpose() * &x;
        assert!((z - want).amax() < 1e-12);
    }

    #[test]
    fn round_trip_and_clamping() {
        let d = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..50 {
            let (m, mask) = random_model(d, Activation::Tanh, trial);
            let target = random_target(d, &mut rng);
            let ctx = RegimeContext::new(&m, &target).unwrap();
            let z = rand_vec(d, &mut rng);
            let c = rand_vec(d, &mut rng);
            let x = m.reverse_map(&mask, &ctx, &z, &c).unwrap();
            for &t in &target {
                assert_eq!(x[t], c[t]);
            }
            let z2 = m.forward_map(&mask, &ctx, &x).unwrap();
            for i in 0..d {
                if ctx.keep[i] {
                    assert!((z2[i] - z[i]).abs() < 1e-7);
                }
            }
            let x2 = m.reverse_map(&mask, &ctx, &z2, &c).unwrap();
            assert!((x2 - &x).amax() < 1e-7);
        }
    }

    #[test]
    fn full_intervention_returns_clamps() {
        let (m, mask) = random_model(5, Activation::Tanh, 3);
        let ctx = RegimeContext::new(&m, &(0..5).collect()).unwrap();
        let c = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let x = m.reverse_map(&mask, &ctx, &DVector::from_element(5, 9.0), &c).unwrap();
        assert_eq!(x, c);
    }

    #[test]
    fn reverse_matches_picard_oracle() {
        let d = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, mask) = random_model(d, Activation::Tanh, 99);
        let ctx = RegimeContext::new(&m, &set(&[2])).unwrap();
        let z = rand_vec(d, &mut rng);
        let c = rand_vec(d, &mut rng);
        let x = m.reverse_map(&mask, &ctx, &z, &c).unwrap();
        // x = U(z + g_z(z) - g_x(x)) + c by plain fixed-point iteration
        let eye = DMatrix::identity(0, 0);
        let base = &z + m.g_z.forward(&eye, &z).unwrap();
        let mut p = DVector::zeros(d);
        for _ in 0..2000 {
            let gx = m.gx(&mask, &p).unwrap();
            p = DVector::from_fn(d, |i, _| if ctx.keep[i] { base[i] - gx[i] } else { c[i] });
        }
        assert!((x - p).amax() < 1e-7);
    }

    #[test]
    fn zero_flow_density_is_standard_normal() {
        let m = zero_model(3);
        let mask = DMatrix::from_element(3, 3, 1.0);
        let x = DVector::from_vec(vec![0.5, -1.5, 0.25]);
        let std_normal = -0.5 * (x.norm_squared() + 3.0 * linalg::LN_2PI);
        let ctx = RegimeContext::new(&m, &set(&[])).unwrap();
        assert!((m.log_density_exact(&mask, &ctx, &x).unwrap() - std_normal).abs() < 1e-12);
        let full = RegimeContext::new(&m, &set(&[0, 1, 2])).unwrap();
        assert!((m.log_density_exact(&mask, &full, &x).unwrap() - std_normal).abs() < 1e-12);
    }

    #[test]
    fn linear_density_matches_implied_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = DirectedMixedGraph::from_edges(3, &[(0, 1), (1, 2), (2, 0)], &[(0, 2)]).unwrap();
        let w = sem_sim::make_contractive(&sem_sim::sample_weights(&g, &mut rng), 0.7);
        let sigma = sem_sim::sample_confounder_covariance(&g, 1.0, &mut rng).unwrap();
        let spec = sem_sim::SemSpec {
            graph: g.clone(),
            weights: w.clone(),
            nonlinearity: sem_sim::Nonlinearity::Linear,
            sigma_z: sigma.clone(),
            intervention_std: 1.3,
        };
        let m = FlowModel::from_linear_sem(&w, &sigma, 1.3);
        let mask = mask_from_graph(&g);
        for target in [set(&[]), set(&[1]), set(&[0, 2])] {
            let cov = spec.linear_covariance(&target).unwrap();
            let ctx = RegimeContext::new(&m, &target).unwrap();
            for _ in 0..5 {
                let x = rand_vec(3, &mut rng);
                let got = m.log_density_exact(&mask, &ctx, &x).unwrap();
                let want = linalg::gaussian_log_density(&x, &cov).unwrap();
                assert!((got - want).abs() < 1e-10, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn density_integrates_to_one_in_two_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = DirectedMixedGraph::from_edges(2, &[(0, 1), (1, 0)], &[(0, 1)]).unwrap();
        let w = sem_sim::make_contractive(&sem_sim::sample_weights(&g, &mut rng), 0.8);
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.8]);
        let m = FlowModel::from_linear_sem(&w, &sigma, 1.0);
        let mask = mask_from_graph(&g);
        let ctx = RegimeContext::new(&m, &set(&[])).unwrap();
        let (n, lim) = (241, 12.0);
        let h = 2.0 * lim / (n - 1) as f64;
        let mut total = 0.0;
        for a in 0..n {
            for b in 0..n {
                let x = DVector::from_vec(vec![-lim + a as f64 * h, -lim + b as f64 * h]);
                total += m.log_density_exact(&mask, &ctx, &x).unwrap().exp();
            }
        }
        assert!((total * h * h - 1.0).abs() < 1e-3, "mass {}", total * h * h);
    }

    #[test]
    fn identity_preconditioner_is_transparent() {
        let (m, mask) = random_model(4, Activation::Tanh, 4);
        let p = m.clone().precondition(DVector::from_element(4, 1.0)).unwrap();
        let x = DVector::from_vec(vec![0.1, -0.7, 1.2, 0.4]);
        assert_eq!(m.gx(&mask, &x).unwrap(), p.gx(&mask, &x).unwrap());
        let ctx = RegimeContext::new(&m, &set(&[1])).unwrap();
        assert_eq!(m.forward_map(&mask, &ctx, &x).unwrap(), p.forward_map(&mask, &ctx, &x).unwrap());
        assert!(m.clone().precondition(DVector::from_vec(vec![1.0, 0.0, 1.0, 1.0])).is_err());
    }

    #[test]
    fn scalar_preconditioner_commutes_with_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = DirectedMixedGraph::from_edges(3, &[(0, 1), (1, 2)], &[]).unwrap();
        let w = sem_sim::make_contractive(&sem_sim::sample_weights(&g, &mut rng), 0.8);
        let m = FlowModel::from_linear_sem(&w, &DMatrix::identity(3, 3), 1.0);
        let p = m.clone().precondition(DVector::from_element(3, 2.0)).unwrap();
        let mask = mask_from_graph(&g);
        let x = rand_vec(3, &mut rng);
        assert!((m.gx(&mask, &x).unwrap() - p.gx(&mask, &x).unwrap()).amax() < 1e-15);
    }

    #[test]
    fn preconditioned_lipschitz_bound() {
        let (m, _) = random_model(4, Activation::Tanh, 12);
        let mask = DMatrix::from_element(4, 4, 1.0);
        let lam = DVector::from_vec(vec![0.5, 1.0, 2.0, 1.5]);
        let cond = 2.0 / 0.5;
        let p = m.clone().precondition(lam).unwrap();
        let lip = m.g_x.lipschitz_bound();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..2000 {
            let x = rand_vec(4, &mut rng);
            let y = rand_vec(4, &mut rng);
            let gap = (p.gx(&mask, &x).unwrap() - p.gx(&mask, &y).unwrap()).norm();
            assert!(gap <= cond * lip * (&x - &y).norm() + 1e-12);
        }
    }
}
