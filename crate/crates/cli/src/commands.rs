use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dccd::implicit_flow::FlowModel;
use dccd::io;
use dccd::metrics::MetricReport;
use dccd::sem_sim::{generate_benchmark, RegimeDataset, SemSpec};
use dccd::structure_learn::{extract_graph, mean_log_likelihood, train_test_split, train_with, TrainOutput, TrainRecord};

use crate::config::ExperimentConfig;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const LEARNED_GRAPH_FILE: &str = "learned_graph.txt";
pub const LEARNED_SIGMA_FILE: &str = "learned_sigma_z.csv";
pub const CONFIG_FILE: &str = "config.txt";

/// Simulated regimes and their generating model, determined by `seed`.
pub fn simulate(cfg: &ExperimentConfig, seed: u64) -> Result<(SemSpec, Vec<RegimeDataset>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(generate_benchmark(&cfg.benchmark(), &mut rng)?)
}

pub fn generate(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<()> {
    let (spec, data) = simulate(cfg, seed)?;
    io::write_dataset(out, &data, Some(&spec))?;
    write_config(out, cfg, seed)?;
    println!(
        "wrote {} regimes of {} samples to {}",
        data.len(),
        cfg.samples_per_regime,
        out.display()
    );
    Ok(())
}

fn write_config(dir: &Path, cfg: &ExperimentConfig, seed: u64) -> Result<()> {
    let text = format!("# config_hash={}\n{}seed={seed}\n", cfg.hash(), cfg.canonical());
    let p = dir.join(CONFIG_FILE);
    fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
}

/// Training split when a hold-out fraction is configured, else the full data.
pub fn split(cfg: &ExperimentConfig, data: &[RegimeDataset], seed: u64) -> (Vec<RegimeDataset>, Vec<RegimeDataset>) {
    if cfg.holdout > 0.0 {
        train_test_split(data, cfg.holdout, seed)
    } else {
        (data.to_vec(), Vec::new())
    }
}

/// Trains on `data`, attaching the last completed pass to any failure.
pub fn fit(cfg: &ExperimentConfig, data: &[RegimeDataset], seed: u64) -> Result<TrainOutput> {
    let mut last: Option<(usize, usize)> = None;
    train_with(data, &cfg.train_config(seed), |r: &TrainRecord| last = Some((r.epoch, r.regime))).with_context(|| match last {
        Some((e, k)) => format!("training failed after epoch {e}, regime {k}"),
        None => "training failed during the first regime pass".to_string(),
    })
}

pub fn train(cfg: &ExperimentConfig, seed: u64, data_dir: &Path, out: &Path) -> Result<()> {
    let data = io::read_dataset(data_dir)?;
    let (train_part, _) = split(cfg, &data, seed);
    let t = Instant::now();
    let result = fit(cfg, &train_part, seed)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    io::write_checkpoint(&out.join(CHECKPOINT_FILE), &result.model)?;
    io::write_train_log(&out.join(LOG_FILE), &result.log)?;
    let learned = extract_graph(&result.model, &cfg.train_config(seed));
    fs::write(out.join(LEARNED_GRAPH_FILE), learned.to_edge_list()).context("writing learned graph")?;
    io::write_matrix_csv(&out.join(LEARNED_SIGMA_FILE), &result.model.sigma_z)?;
    write_config(out, cfg, seed)?;
    println!(
        "trained {} epochs in {:.1}s; {} directed and {} bidirected edges; checkpoint {}",
        cfg.train.epochs,
        t.elapsed().as_secs_f64(),
        learned.num_directed(),
        learned.num_bidirected(),
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

/// One evaluated model: metrics against the truth and the held-out NLL.
#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    pub shd: Option<usize>,
    pub shd_normalized: Option<f64>,
    pub f1_bidirected: Option<f64>,
    pub tp_bidirected: Option<usize>,
    pub fp_bidirected: Option<usize>,
    pub fn_bidirected: Option<usize>,
    pub auprc_directed: Option<f64>,
    pub auprc_bidirected: Option<f64>,
    /// Mean negative log-likelihood per held-out sample.
    pub nll: Option<f64>,
}

fn cell<T: ToString>(v: Option<T>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

impl Evaluation {
    pub const COLUMNS: [&'static str; 9] = [
        "shd",
        "shd_normalized",
        "f1_bidirected",
        "tp_bidirected",
        "fp_bidirected",
        "fn_bidirected",
        "auprc_directed",
        "auprc_bidirected",
        "nll",
    ];

    /// Values in [`Self::COLUMNS`] order; missing entries are empty.
    pub fn values(&self) -> Vec<String> {
        vec![
            cell(self.shd),
            cell(self.shd_normalized),
            cell(self.f1_bidirected),
            cell(self.tp_bidirected),
            cell(self.fp_bidirected),
            cell(self.fn_bidirected),
            cell(self.auprc_directed),
            cell(self.auprc_bidirected),
            cell(self.nll),
        ]
    }

    /// Numeric values in [`Self::COLUMNS`] order.
    pub fn numbers(&self) -> Vec<Option<f64>> {
        vec![
            self.shd.map(|v| v as f64),
            self.shd_normalized,
            self.f1_bidirected,
            self.tp_bidirected.map(|v| v as f64),
            self.fp_bidirected.map(|v| v as f64),
            self.fn_bidirected.map(|v| v as f64),
            self.auprc_directed,
            self.auprc_bidirected,
            self.nll,
        ]
    }
}

pub fn evaluate_model(
    cfg: &ExperimentConfig,
    seed: u64,
    model: &FlowModel,
    truth: Option<&SemSpec>,
    test: &[RegimeDataset],
) -> Result<Evaluation> {
    let mut e = Evaluation::default();
    if let Some(spec) = truth {
        if spec.graph.num_vertices() != model.dim() {
            bail!("model has d={} but the ground truth has d={}", model.dim(), spec.graph.num_vertices());
        }
        let g_hat = extract_graph(model, &cfg.train_config(seed));
        let r = MetricReport::compute(&g_hat, &model.edge_probabilities(), &model.sigma_z, &spec.graph, cfg.train.cov_threshold)?;
        e.shd = Some(r.shd);
        e.shd_normalized = Some(r.shd_normalized);
        e.f1_bidirected = Some(r.f1_bidirected);
        e.tp_bidirected = Some(r.bidirected.tp);
        e.fp_bidirected = Some(r.bidirected.fp);
        e.fn_bidirected = Some(r.bidirected.fn_);
        e.auprc_directed = r.auprc_directed;
        e.auprc_bidirected = r.auprc_bidirected;
    }
    if test.iter().any(|r| !r.is_empty()) {
        e.nll = Some(-mean_log_likelihood(model, test)?);
    }
    Ok(e)
}

pub fn evaluate(cfg: &ExperimentConfig, seed: u64, model_path: &Path, data_dir: &Path, out: Option<&PathBuf>) -> Result<()> {
    let model = io::read_checkpoint(model_path)?;
    let manifest = io::read_manifest(data_dir)?;
    if manifest.d != model.dim() {
        bail!("dimension mismatch: model has d={}, dataset {} has d={}", model.dim(), data_dir.display(), manifest.d);
    }
    let truth = io::read_ground_truth(data_dir)?;
    let test = if cfg.holdout > 0.0 {
        split(cfg, &io::read_dataset(data_dir)?, seed).1
    } else {
        Vec::new()
    };
    let eval = evaluate_model(cfg, seed, &model, truth.as_ref(), &test)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["config_hash", "seed", "d"];
    header.extend(Evaluation::COLUMNS);
    w.write_record(&header)?;
    let mut row = vec![cfg.hash(), seed.to_string(), model.dim().to_string()];
    row.extend(eval.values());
    w.write_record(&row)?;
    let text = String::from_utf8(w.into_inner()?)?;
    print!("{text}");
    if let Some(p) = out {
        fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}
