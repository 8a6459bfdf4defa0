//! Score-based structure learning over interventional regimes.
//!
//! Each epoch visits every regime: a pass of Adam ascent steps on the relaxed
//! score over the regime's minibatches, followed by one graphical-lasso sweep on the
//! regime's non-intervened covariance block.

pub mod adam;
pub mod gumbel;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance_est;
use crate::error::{Error, Result};
use crate::graphs::DirectedMixedGraph;
use crate::implicit_flow::{FlowArchitecture, FlowGrads, FlowModel, LogDetEstimator, LogDetMode, RegimeContext};
use crate::linalg;
use crate::nnet::Activation;
use crate::sem_sim::RegimeDataset;
pub use adam::AdamState;
pub use gumbel::{sample_adjacency, AdjacencySample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lambda_sparsity: f64,
    pub rho_glasso: f64,
    pub gumbel_temperature: f64,
    /// Multiplicative temperature decay per epoch; 1 disables annealing.
    pub temperature_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub logdet: LogDetMode,
    pub edge_threshold: f64,
    pub cov_threshold: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lipschitz_cap: f64,
    /// Keep `g_z` at zero.
    pub freeze_gz: bool,
    /// Learn a diagonal preconditioner for `g_x`.
    pub precondition: bool,
    /// Abort after this many minibatches with solver failures.
    pub max_solver_failures: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            lambda_sparsity: 1e-3,
            rho_glasso: 1e-2,
            gumbel_temperature: 1.0,
            temperature_decay: 1.0,
            batch_size: 128,
            epochs: 50,
            logdet: LogDetMode::Stochastic(LogDetEstimator::default()),
            edge_threshold: 0.8,
            cov_threshold: 0.01,
            seed: 0,
            hidden: vec![16],
            activation: Activation::Tanh,
            lipschitz_cap: 0.9,
            freeze_gz: false,
            precondition: false,
            max_solver_failures: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("gumbel_temperature", self.gumbel_temperature),
            ("temperature_decay", self.temperature_decay),
            ("edge_threshold", self.edge_threshold),
            ("cov_threshold", self.cov_threshold),
            ("lipschitz_cap", self.lipschitz_cap),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("lambda_sparsity", self.lambda_sparsity), ("rho_glasso", self.rho_glasso)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.lipschitz_cap > 1.0 {
            return Err(Error::InvalidArgument("lipschitz_cap must not exceed 1".into()));
        }
        if let LogDetMode::Stochastic(est) = &self.logdet {
            est.truncation.validate()?;
            if est.n_probe == 0 {
                return Err(Error::InvalidArgument("n_probe must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn architecture(&self) -> FlowArchitecture {
        FlowArchitecture {
            hidden: self.hidden.clone(),
            activation: self.activation,
            lipschitz_cap: self.lipschitz_cap,
        }
    }
}

/// Gradients of the minibatch score.
#[derive(Debug, Clone)]
pub struct ScoreGrads {
    pub flow: FlowGrads,
    pub logits: DMatrix<f64>,
}

/// Relaxed score `Σ_samples log p(x) − λ Σ soft` for one minibatch of one regime,
/// with one adjacency draw shared by the batch.
pub fn minibatch_score<R: Rng + ?Sized>(
    model: &FlowModel,
    batch: &[DVector<f64>],
    ctx: &RegimeContext,
    config: &TrainConfig,
    temperature: f64,
    rng: &mut R,
) -> Result<(f64, ScoreGrads)> {
    let adj = sample_adjacency(&model.edge_logits, temperature, rng)?;
    let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
    let evals: Vec<Result<_>> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(x, &seed)| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            model.implicit_gradients(&adj.hard, ctx, x, &config.logdet, 1.0, &mut r)
        })
        .collect();
    let mut total = FlowGrads::zeros(model);
    let mut score = 0.0;
    for e in evals {
        let e = e?;
        score += e.log_density;
        total.add_scaled(&e.grads, 1.0);
    }
    score -= config.lambda_sparsity * adj.soft_l1();
    let d = model.dim();
    let mut mask_grad = total.mask.clone();
    for i in 0..d {
        for j in 0..d {
            if i != j {
                mask_grad[(i, j)] -= config.lambda_sparsity;
            }
        }
    }
    let logits = adj.logit_gradient(&mask_grad);
    if config.freeze_gz {
        total.g_z.scale(0.0);
    }
    Ok((score, ScoreGrads { flow: total, logits }))
}

/// Parameters in optimizer order: `g_x`, `g_z`, edge logits, preconditioner.
pub fn flatten_params(model: &FlowModel) -> Vec<f64> {
    let mut p = model.g_x.params();
    p.extend(model.g_z.params());
    p.extend(model.edge_logits.iter());
    if let Some(l) = &model.precondition {
        p.extend(l.iter());
    }
    p
}

pub fn unflatten_params(model: &mut FlowModel, p: &[f64]) -> Result<()> {
    let nx = model.g_x.num_params();
    let nz = model.g_z.num_params();
    let d = model.dim();
    let want = nx + nz + d * d + model.precondition.as_ref().map_or(0, |l| l.len());
    if p.len() != want {
        return Err(Error::DimensionMismatch { expected: want, got: p.len() });
    }
    model.g_x.set_params(&p[..nx])?;
    model.g_z.set_params(&p[nx..nx + nz])?;
    let off = nx + nz;
    model.edge_logits.copy_from_slice(&p[off..off + d * d]);
    if let Some(l) = &mut model.precondition {
        l.copy_from_slice(&p[off + d * d..]);
    }
    Ok(())
}

pub fn flatten_grads(g: &ScoreGrads) -> Vec<f64> {
    let mut p = g.flow.g_x.flatten();
    p.extend(g.flow.g_z.flatten());
    p.extend(g.logits.iter());
    if let Some(l) = &g.flow.precondition {
        p.extend(l.iter());
    }
    p
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub regime: usize,
    /// Mean per-sample score over the regime pass.
    pub score: f64,
    pub cov_logdet: f64,
    pub solver_failures: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: FlowModel,
    pub log: Vec<TrainRecord>,
}

/// Fresh model for `d` variables with the configured architecture.
pub fn init_model(d: usize, config: &TrainConfig) -> Result<FlowModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = FlowModel::new(d, &config.architecture(), &mut rng)?;
    if config.freeze_gz {
        let zero = vec![0.0; model.g_z.num_params()];
        model.g_z.set_params(&zero)?;
    }
    if config.precondition {
        model = model.precondition(DVector::from_element(d, 1.0))?;
    }
    for i in 0..d {
        model.edge_logits[(i, i)] = -1e3;
    }
    Ok(model)
}

fn check_datasets(datasets: &[RegimeDataset]) -> Result<usize> {
    let Some(d) = datasets.iter().find_map(|r| r.dim()) else {
        return Err(Error::InvalidArgument("training needs at least one non-empty regime".into()));
    };
    for r in datasets {
        if let Some(&t) = r.target.iter().next_back() {
            if t >= d {
                return Err(Error::InvalidArgument(format!("target {t} out of range for d={d}")));
            }
        }
        for s in &r.samples {
            if s.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: s.len() });
            }
        }
    }
    Ok(d)
}

/// Alternating optimization over all regimes.
pub fn train(datasets: &[RegimeDataset], config: &TrainConfig) -> Result<TrainOutput> {
    train_with(datasets, config, |_| {})
}

/// As [`train`], calling `on_record` after each regime pass.
pub fn train_with<F: FnMut(&TrainRecord)>(
    datasets: &[RegimeDataset],
    config: &TrainConfig,
    mut on_record: F,
) -> Result<TrainOutput> {
    config.validate()?;
    let d = check_datasets(datasets)?;
    let mut model = init_model(d, config)?;
    if let Some(r) = datasets.first() {
        model.intervention_std = r.intervention_std;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut params = flatten_params(&model);
    let mut adam = AdamState::new(params.len());
    let mut log = Vec::new();
    let mut failures = 0usize;
    let mut temperature = config.gumbel_temperature;
    for epoch in 0..config.epochs {
        for (k, regime) in datasets.iter().enumerate() {
            if regime.is_empty() {
                continue;
            }
            let mut order: Vec<usize> = (0..regime.len()).collect();
            order.shuffle(&mut rng);
            let mut pass_score = 0.0;
            let mut pass_failures = 0;
            for chunk in order.chunks(config.batch_size) {
                let batch: Vec<DVector<f64>> = chunk.iter().map(|&i| regime.samples[i].clone()).collect();
                let ctx = RegimeContext::new(&model, &regime.target)?;
                match minibatch_score(&model, &batch, &ctx, config, temperature, &mut rng) {
                    Ok((score, grads)) => {
                        pass_score += score;
                        adam.step(&mut params, &flatten_grads(&grads), config.learning_rate)?;
                        unflatten_params(&mut model, &params)?;
                        model.spectral_normalize();
                        params = flatten_params(&model);
                    }
                    Err(Error::NoConvergence { .. }) | Err(Error::Singular(_)) => {
                        pass_failures += 1;
                        failures += 1;
                        if failures > config.max_solver_failures {
                            return Err(Error::NoConvergence {
                                solver: "training inner solves",
                                iterations: failures,
                                residual: f64::NAN,
                            });
                        }
                    }
                    Err(e) => return Err(e),
                }
            }
            update_covariance(&mut model, regime, config.rho_glasso)?;
            let rec = TrainRecord {
                epoch,
                regime: k,
                score: pass_score / regime.len() as f64,
                cov_logdet: linalg::log_abs_det(&model.sigma_z)?,
                solver_failures: pass_failures,
            };
            on_record(&rec);
            log.push(rec);
        }
        temperature *= config.temperature_decay;
    }
    Ok(TrainOutput { model, log })
}

/// Noise residuals of a regime under the most likely adjacency.
pub fn regime_residuals(model: &FlowModel, regime: &RegimeDataset) -> Result<Vec<DVector<f64>>> {
    let mask = model.mode_mask();
    let ctx = RegimeContext::new(model, &regime.target)?;
    regime
        .samples
        .par_iter()
        .map(|x| model.forward_map(&mask, &ctx, x))
        .collect()
}

fn update_covariance(model: &mut FlowModel, regime: &RegimeDataset, rho: f64) -> Result<()> {
    if regime.target.len() == model.dim() {
        return Ok(());
    }
    let z = regime_residuals(model, regime)?;
    covariance_est::glasso_update(&mut model.sigma_z, &regime.target, &z, rho)
}

/// Directed `i -> j` iff `σ(B_ij)` exceeds the edge threshold; bidirected `i <-> j`
/// iff `|Σ̂_ij|` exceeds the covariance threshold.
pub fn extract_graph(model: &FlowModel, config: &TrainConfig) -> DirectedMixedGraph {
    let d = model.dim();
    let probs = model.edge_probabilities();
    let mut g = DirectedMixedGraph::empty(d);
    for i in 0..d {
        for j in 0..d {
            if i == j {
                continue;
            }
            if probs[(i, j)] > config.edge_threshold {
                g.add_directed(i, j).expect("indices in range");
            }
            if i < j && model.sigma_z[(i, j)].abs() > config.cov_threshold {
                g.add_bidirected(i, j).expect("indices in range");
            }
        }
    }
    g
}

/// Mean held-out log-likelihood per sample with exact log-determinants, using the
/// most likely adjacency.
pub fn mean_log_likelihood(model: &FlowModel, datasets: &[RegimeDataset]) -> Result<f64> {
    let mask = model.mode_mask();
    let mut total = 0.0;
    let mut count = 0usize;
    for r in datasets {
        if r.is_empty() {
            continue;
        }
        let ctx = RegimeContext::new(model, &r.target)?;
        let lls: Vec<Result<f64>> = r.samples.par_iter().map(|x| model.log_density_exact(&mask, &ctx, x)).collect();
        for ll in lls {
            total += ll?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    Ok(total / count as f64)
}

/// Split each regime into a training part and a held-out part of `holdout` fraction by seeded shuffle.
pub fn train_test_split(datasets: &[RegimeDataset], holdout: f64, seed: u64) -> (Vec<RegimeDataset>, Vec<RegimeDataset>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for r in datasets {
        let mut idx: Vec<usize> = (0..r.len()).collect();
        idx.shuffle(&mut rng);
        let n_test = (r.len() as f64 * holdout).round() as usize;
        let pick = |ix: &[usize]| RegimeDataset {
            target: r.target.clone(),
            samples: ix.iter().map(|&i| r.samples[i].clone()).collect(),
            intervention_std: r.intervention_std,
        };
        test.push(pick(&idx[..n_test]));
        train.push(pick(&idx[n_test..]));
    }
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::VertexSet;
    use crate::implicit_flow::mask_from_graph;

    fn set(v: &[usize]) -> VertexSet {
        v.iter().copied().collect()
    }

    fn zero_model(d: usize) -> FlowModel {
        let mut m = FlowModel::from_linear_sem(&DMatrix::zeros(d, d), &DMatrix::identity(d, d), 1.0);
        m.edge_logits.fill(0.0);
        m
    }

    #[test]
    fn score_of_identity_model_is_standard_normal() {
        let m = zero_model(3);
        let batch = vec![DVector::from_vec(vec![0.1, -0.4, 1.0]), DVector::from_vec(vec![2.0, 0.0, -1.0])];
        let ctx = RegimeContext::new(&m, &set(&[])).unwrap();
        let cfg = TrainConfig { lambda_sparsity: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s, _) = minibatch_score(&m, &batch, &ctx, &cfg, 1.0, &mut rng).unwrap();
        let want: f64 = batch.iter().map(|x| -0.5 * (x.norm_squared() + 3.0 * linalg::LN_2PI)).sum();
        assert!((s - want).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_scores_penalty_only() {
        let m = zero_model(3);
        let ctx = RegimeContext::new(&m, &set(&[])).unwrap();
        let cfg = TrainConfig { lambda_sparsity: 0.5, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (s, _) = minibatch_score(&m, &[], &ctx, &cfg, 1.0, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let adj = sample_adjacency(&m.edge_logits, 1.0, &mut rng).unwrap();
        assert!((s + 0.5 * adj.soft_l1()).abs() < 1e-15);
    }

    #[test]
    fn penalty_is_monotone_and_has_exact_gradient() {
        let m = zero_model(3);
        let ctx = RegimeContext::new(&m, &set(&[])).unwrap();
        let batch = vec![DVector::from_vec(vec![0.1, -0.4, 1.0])];
        let mut prev = f64::INFINITY;
        let mut grads = Vec::new();
        for lambda in [0.0, 0.1, 1.0] {
            let cfg = TrainConfig { lambda_sparsity: lambda, ..Default::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let (s, g) = minibatch_score(&m, &batch, &ctx, &cfg, 1.0, &mut rng).unwrap();
            assert!(s < prev);
            prev = s;
            grads.push(g);
        }
        // zero model: mask gradient comes from the penalty alone
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let adj = sample_adjacency(&m.edge_logits, 1.0, &mut rng).unwrap();
        let mut minus_one = DMatrix::from_element(3, 3, -1.0);
        for i in 0..3 {
            minus_one[(i, i)] = 0.0;
        }
        let want = adj.logit_gradient(&minus_one);
        assert!((&grads[2].logits - &grads[0].logits - &want).amax() < 1e-12);
    }

    #[test]
    fn flatten_round_trip() {
        let cfg = TrainConfig { precondition: true, ..Default::default() };
        let mut m = init_model(4, &cfg).unwrap();
        let p = flatten_params(&m);
        let before = m.clone();
        unflatten_params(&mut m, &p).unwrap();
        assert_eq!(m, before);
        assert!(unflatten_params(&mut m, &p[1..]).is_err());
    }

    #[test]
    fn zero_epochs_return_initial_model() {
        let ds = vec![RegimeDataset {
            target: set(&[]),
            samples: vec![DVector::from_vec(vec![0.0, 1.0])],
            intervention_std: 1.0,
        }];
        let cfg = TrainConfig { epochs: 0, seed: 9, ..Default::default() };
        let out = train(&ds, &cfg).unwrap();
        assert_eq!(out.model, init_model(2, &cfg).unwrap());
        assert!(out.log.is_empty());
        assert!(train(&[], &cfg).is_err());
    }

    #[test]
    fn fully_intervened_regime_only_shrinks_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = (0..64).map(|_| DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0))).collect();
        let ds = vec![RegimeDataset { target: set(&[0, 1, 2]), samples, intervention_std: 1.0 }];
        let cfg = TrainConfig { epochs: 5, batch_size: 32, lambda_sparsity: 1.0, ..Default::default() };
        let init = init_model(3, &cfg).unwrap();
        let out = train(&ds, &cfg).unwrap();
        assert!(out.model.edge_probabilities().sum() < init.edge_probabilities().sum());
        assert_eq!(out.model.sigma_z, init.sigma_z);
        // no mechanism term: network weights receive no gradient
        assert_eq!(out.model.g_x, init.g_x);
    }

    #[test]
    fn extraction_thresholds() {
        let mut m = zero_model(3);
        let cfg = TrainConfig::default();
        assert_eq!(extract_graph(&m, &cfg), DirectedMixedGraph::empty(3));
        m.edge_logits[(0, 1)] = 5.0;
        m.sigma_z[(1, 2)] = 0.3;
        m.sigma_z[(2, 1)] = 0.3;
        let want = DirectedMixedGraph::from_edges(3, &[(0, 1)], &[(1, 2)]).unwrap();
        assert_eq!(extract_graph(&m, &cfg), want);
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<_> = (0..100).map(|_| DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0))).collect();
        let ds = vec![
            RegimeDataset { target: set(&[]), samples: samples.clone(), intervention_std: 1.0 },
            RegimeDataset { target: set(&[1]), samples, intervention_std: 1.0 },
        ];
        let cfg = TrainConfig { epochs: 2, batch_size: 32, ..Default::default() };
        let a = train(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn true_linear_model_scores_its_data_well() {
        let g = DirectedMixedGraph::from_edges(2, &[(0, 1)], &[]).unwrap();
        let w = DMatrix::from_row_slice(2, 2, &[0.0, 0.7, 0.0, 0.0]);
        let m = FlowModel::from_linear_sem(&w, &DMatrix::identity(2, 2), 1.0);
        let mask = mask_from_graph(&g);
        let ctx = RegimeContext::new(&m, &set(&[])).unwrap();
        let x = DVector::from_vec(vec![1.0, 0.7]);
        // z = (1, 0)
        let want = -0.5 * (1.0 + 2.0 * linalg::LN_2PI);
        assert!((m.log_density_exact(&mask, &ctx, &x).unwrap() - want).abs() < 1e-12);
    }
}
