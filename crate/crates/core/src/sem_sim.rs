//! Ground-truth structural equation models and interventional sampling.
//!
//! Mechanisms are `x = Wᵀx + z` (linear) or `x = tanh(Wᵀx + z)`, with
//! `z ~ N(0, Σ_Z)`. A hard intervention on target set `I` replaces `x_i`,
//! `i ∈ I`, by an independent draw `c_i ~ N(0, s²)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphs::{DirectedMixedGraph, VertexSet};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Linear,
    Tanh,
}

impl std::fmt::Display for Nonlinearity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Nonlinearity::Linear => "linear",
            Nonlinearity::Tanh => "tanh",
        })
    }
}

impl std::str::FromStr for Nonlinearity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Nonlinearity::Linear),
            "tanh" | "nonlinear" => Ok(Nonlinearity::Tanh),
            other => Err(Error::parse("sem kind", format!("unknown `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SemSpec {
    pub graph: DirectedMixedGraph,
    /// `weights[(i, j)]` is the weight on `i -> j`.
    pub weights: DMatrix<f64>,
    pub nonlinearity: Nonlinearity,
    pub sigma_z: DMatrix<f64>,
    /// Scale of the intervention-value law `N(0, s²)`.
    pub intervention_std: f64,
}

impl SemSpec {
    pub fn dim(&self) -> usize {
        self.graph.num_vertices()
    }

    /// Weight support equals the directed edges, Σ_Z is SPD with support equal to the bidirected edges.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.weights.shape() != (d, d) || self.sigma_z.shape() != (d, d) {
            return Err(Error::InvalidArgument("SEM matrices must be d x d".into()));
        }
        for i in 0..d {
            for j in 0..d {
                if (self.weights[(i, j)] != 0.0) != self.graph.has_directed(i, j) {
                    return Err(Error::InvalidArgument(format!(
                        "weight support differs from graph at ({i}, {j})"
                    )));
                }
                if i != j {
                    if self.sigma_z[(i, j)] != self.sigma_z[(j, i)] {
                        return Err(Error::InvalidArgument("Σ_Z not symmetric".into()));
                    }
                    if (self.sigma_z[(i, j)] != 0.0) != self.graph.has_bidirected(i, j) {
                        return Err(Error::InvalidArgument(format!(
                            "Σ_Z support differs from graph at ({i}, {j})"
                        )));
                    }
                }
            }
        }
        if !linalg::is_positive_definite(&self.sigma_z) {
            return Err(Error::NotPositiveDefinite("Σ_Z".into()));
        }
        Ok(())
    }

    /// Covariance of `x` under a linear SEM in regime `target`:
    /// `(I − UWᵀ)⁻¹ (UΣU + s²(I−U)) (I − UWᵀ)⁻ᵀ`.
    pub fn linear_covariance(&self, target: &VertexSet) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let u = DMatrix::from_fn(d, d, |i, j| {
            if i == j && !target.contains(&i) {
                1.0
            } else {
                0.0
            }
        });
        let a = DMatrix::identity(d, d) - &u * self.weights.transpose();
        let a_inv = a
            .try_inverse()
            .ok_or_else(|| Error::Singular("I - U Wᵀ".into()))?;
        let mut noise = &u * &self.sigma_z * &u;
        for &t in target {
            noise[(t, t)] = self.intervention_std * self.intervention_std;
        }
        Ok(&a_inv * noise * a_inv.transpose())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeDataset {
    pub target: VertexSet,
    pub samples: Vec<DVector<f64>>,
    pub intervention_std: f64,
}

impl RegimeDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.len())
    }
}

/// Draw from `Unif((−0.9, −0.2) ∪ (0.2, 0.9))` for each directed edge.
pub fn sample_weights<R: Rng + ?Sized>(graph: &DirectedMixedGraph, rng: &mut R) -> DMatrix<f64> {
    let d = graph.num_vertices();
    let mut w = DMatrix::zeros(d, d);
    for (i, j) in graph.directed_edges() {
        let mag = rng.random_range(0.2..0.9);
        w[(i, j)] = if rng.random::<bool>() { mag } else { -mag };
    }
    w
}

/// Rescale so the largest singular value is at most `target_norm`.
pub fn make_contractive(w: &DMatrix<f64>, target_norm: f64) -> DMatrix<f64> {
    let s = linalg::spectral_norm_exact(w);
    if s > target_norm {
        w * (target_norm / s)
    } else {
        w.clone()
    }
}

/// Rescale to a random spectral norm in `(1, 2]`; only meaningful for acyclic graphs.
pub fn make_noncontractive<R: Rng + ?Sized>(w: &DMatrix<f64>, rng: &mut R) -> DMatrix<f64> {
    let s = linalg::spectral_norm_exact(w);
    if s == 0.0 {
        return w.clone();
    }
    let target = 2.0 - rng.random_range(0.0..1.0);
    w * (target / s)
}

const COV_PROJECTION_ROUNDS: usize = 50;

/// Random SPD covariance whose off-diagonal support is exactly the bidirected edge
/// set and whose largest diagonal entry is `max_std²`.
///
/// Diagonals are `Unif(0.5, 1)`, confounded pairs get correlations of magnitude
/// `Unif(0.3, 0.7)`; if the result is not positive definite it is alternately
/// projected onto the PD cone (eigenvalue floor) and back onto the sparsity pattern.
pub fn sample_confounder_covariance<R: Rng + ?Sized>(
    graph: &DirectedMixedGraph,
    max_std: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if !(max_std > 0.0) {
        return Err(Error::InvalidArgument(format!("max_std must be positive, got {max_std}")));
    }
    let d = graph.num_vertices();
    let diag: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..1.0)).collect();
    let mut m = DMatrix::from_diagonal(&DVector::from_vec(diag.clone()));
    for (i, j) in graph.bidirected_edges() {
        let r = rng.random_range(0.3..0.7) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        let v = r * (diag[i] * diag[j]).sqrt();
        m[(i, j)] = v;
        m[(j, i)] = v;
    }

    let mut rounds = 0;
    while !linalg::is_positive_definite(&m) {
        if rounds == COV_PROJECTION_ROUNDS {
            return Err(Error::NotPositiveDefinite(format!(
                "confounder covariance after {rounds} projection rounds"
            )));
        }
        let floor = 0.05 * m.diagonal().max();
        let eig = SymmetricEigen::new(m.clone());
        let clipped = eig.eigenvalues.map(|l| l.max(floor));
        let proj = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] = if i == j || graph.has_bidirected(i, j) {
                    0.5 * (proj[(i, j)] + proj[(j, i)])
                } else {
                    0.0
                };
            }
        }
        rounds += 1;
    }

    let scale = max_std * max_std / m.diagonal().max();
    Ok(m * scale)
}

const PICARD_TOL: f64 = 1e-10;
const PICARD_MAX_ITER: usize = 100_000;

/// Draw `n` equilibrium samples of the SEM under hard intervention on `target`.
pub fn simulate<R: Rng + ?Sized>(
    spec: &SemSpec,
    target: &VertexSet,
    n: usize,
    rng: &mut R,
) -> Result<RegimeDataset> {
    let d = spec.dim();
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    if let Some(&t) = target.iter().find(|&&t| t >= d) {
        return Err(Error::InvalidArgument(format!("target {t} out of range")));
    }
    let chol = linalg::cholesky(&spec.sigma_z)?;
    let l = chol.l();
    let keep: Vec<bool> = (0..d).map(|i| !target.contains(&i)).collect();
    let wt = spec.weights.transpose();

    let linear_system = if spec.nonlinearity == Nonlinearity::Linear {
        let mut a = DMatrix::identity(d, d);
        for i in 0..d {
            if keep[i] {
                for j in 0..d {
                    a[(i, j)] -= wt[(i, j)];
                }
            }
        }
        Some(a.lu())
    } else {
        None
    };
    let topo = spec.graph.topological_order();

    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let eps = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let z = &l * eps;
        let mut c = DVector::zeros(d);
        for &t in target {
            c[t] = spec.intervention_std * rng.sample::<f64, _>(StandardNormal);
        }
        let x = match (&linear_system, &topo) {
            (Some(lu), _) => {
                let rhs = DVector::from_fn(d, |i, _| if keep[i] { z[i] } else { c[i] });
                lu.solve(&rhs)
                    .ok_or_else(|| Error::Singular("I - U Wᵀ".into()))?
            }
            (None, Some(order)) => {
                let mut x = DVector::zeros(d);
                for &i in order {
                    x[i] = if keep[i] {
                        (wt.row(i).transpose().dot(&x) + z[i]).tanh()
                    } else {
                        c[i]
                    };
                }
                x
            }
            (None, None) => picard_tanh(&wt, &z, &c, &keep)?,
        };
        samples.push(x);
    }
    Ok(RegimeDataset {
        target: target.clone(),
        samples,
        intervention_std: spec.intervention_std,
    })
}

fn picard_tanh(
    wt: &DMatrix<f64>,
    z: &DVector<f64>,
    c: &DVector<f64>,
    keep: &[bool],
) -> Result<DVector<f64>> {
    let d = z.len();
    let step = |x: &DVector<f64>| {
        let lin = wt * x + z;
        DVector::from_fn(d, |i, _| if keep[i] { lin[i].tanh() } else { c[i] })
    };
    let mut x = step(&DVector::zeros(d));
    for _ in 0..PICARD_MAX_ITER {
        let next = step(&x);
        let res = (&next - &x).amax();
        x = next;
        if res < PICARD_TOL {
            return Ok(x);
        }
    }
    let res = (&step(&x) - &x).amax();
    Err(Error::NoConvergence {
        solver: "SEM fixed-point iteration (non-contractive weights?)",
        iterations: PICARD_MAX_ITER,
        residual: res,
    })
}

/// `‖x − U·F(x, z) − c‖∞` for the data-generating mechanism.
pub fn equilibrium_residual(
    spec: &SemSpec,
    target: &VertexSet,
    x: &DVector<f64>,
    z: &DVector<f64>,
    c: &DVector<f64>,
) -> f64 {
    let lin = spec.weights.transpose() * x + z;
    (0..spec.dim())
        .map(|i| {
            let f = if target.contains(&i) {
                c[i]
            } else {
                match spec.nonlinearity {
                    Nonlinearity::Linear => lin[i],
                    Nonlinearity::Tanh => lin[i].tanh(),
                }
            };
            (x[i] - f).abs()
        })
        .fold(0.0, f64::max)
}

/// Parameters of a synthetic benchmark instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub d: usize,
    pub out_density: f64,
    /// Number of confounded pairs as a fraction of `d`, rounded.
    pub confounder_ratio: f64,
    pub nonlinearity: Nonlinearity,
    /// Rescale weights to this spectral norm; `None` makes them non-contractive.
    pub contractive_norm: Option<f64>,
    pub max_noise_std: f64,
    pub intervention_std: f64,
    pub samples_per_regime: usize,
    /// Number of single-node interventions; nodes are chosen uniformly at random.
    pub n_interventions: usize,
    /// Also emit an observational regime first.
    pub observational: bool,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            d: 10,
            out_density: 2.0,
            confounder_ratio: 0.4,
            nonlinearity: Nonlinearity::Linear,
            contractive_norm: Some(0.8),
            max_noise_std: 0.5,
            intervention_std: 1.0,
            samples_per_regime: 1000,
            n_interventions: 10,
            observational: true,
        }
    }
}

impl BenchmarkSpec {
    /// `round(ratio · d)`, clamped to the number of vertex pairs.
    pub fn n_confounders(&self) -> usize {
        let pairs = self.d * self.d.saturating_sub(1) / 2;
        ((self.confounder_ratio.max(0.0) * self.d as f64).round() as usize).min(pairs)
    }
}

/// Random graph, SEM and regime datasets for one benchmark instance.
pub fn generate_benchmark<R: Rng + ?Sized>(b: &BenchmarkSpec, rng: &mut R) -> Result<(SemSpec, Vec<RegimeDataset>)> {
    if b.n_interventions > b.d {
        return Err(Error::InvalidArgument(format!(
            "{} single-node interventions requested for d={}",
            b.n_interventions, b.d
        )));
    }
    if !b.observational && b.n_interventions == 0 {
        return Err(Error::InvalidArgument("benchmark has no regimes".into()));
    }
    let graph = crate::graphs::generate_er_dmg(b.d, b.out_density, b.n_confounders(), rng)?;
    let raw = sample_weights(&graph, rng);
    let weights = match b.contractive_norm {
        Some(t) => make_contractive(&raw, t),
        None => make_noncontractive(&raw, rng),
    };
    let sigma_z = sample_confounder_covariance(&graph, b.max_noise_std, rng)?;
    let spec = SemSpec {
        graph,
        weights,
        nonlinearity: b.nonlinearity,
        sigma_z,
        intervention_std: b.intervention_std,
    };
    spec.validate()?;
    let mut nodes: Vec<usize> = rand::seq::index::sample(rng, b.d, b.n_interventions).into_vec();
    nodes.sort_unstable();
    let mut targets: Vec<VertexSet> = Vec::new();
    if b.observational {
        targets.push(VertexSet::new());
    }
    targets.extend(nodes.into_iter().map(|i| VertexSet::from([i])));
    let data = targets
        .iter()
        .map(|t| simulate(&spec, t, b.samples_per_regime, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok((spec, data))
}
