//! Flat `key=value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Later assignments override earlier
//! ones, so command-line overrides are appended after the file contents.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{anyhow, bail, Context, Result};
use sha2::{Digest, Sha256};

use dccd::implicit_flow::{LogDetEstimator, LogDetMode, ProbeKind, TruncationDistribution};
use dccd::nnet::Activation;
use dccd::sem_sim::{BenchmarkSpec, Nonlinearity};
use dccd::structure_learn::TrainConfig;

pub type Pairs = BTreeMap<String, String>;

pub fn parse_pairs(text: &str) -> Result<Pairs> {
    let mut out = Pairs::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected key=value, got `{line}`", n + 1))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Every setting of one experiment cell, with defaults filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub d: usize,
    pub out_density: f64,
    pub confounder_ratio: f64,
    pub sem: Nonlinearity,
    pub contractive: bool,
    pub contractive_norm: f64,
    pub max_noise_std: f64,
    pub intervention_std: f64,
    pub samples_per_regime: usize,
    /// Number of single-node intervention regimes; `None` means every node.
    pub interventions: Option<usize>,
    pub observational: bool,
    /// Held-out fraction per regime for the negative log-likelihood; 0 disables it.
    pub holdout: f64,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let b = BenchmarkSpec::default();
        ExperimentConfig {
            d: b.d,
            out_density: b.out_density,
            confounder_ratio: b.confounder_ratio,
            sem: b.nonlinearity,
            contractive: true,
            contractive_norm: b.contractive_norm.unwrap_or(0.8),
            max_noise_std: b.max_noise_std,
            intervention_std: b.intervention_std,
            samples_per_regime: b.samples_per_regime,
            interventions: None,
            observational: true,
            holdout: 0.0,
            train: TrainConfig::default(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| anyhow!("config key `{key}`: cannot parse `{v}`: {e}"))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("config key `{key}`: expected true or false, got `{v}`"),
    }
}

impl ExperimentConfig {
    pub fn from_pairs(pairs: &Pairs) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        let (mut truncation, mut truncation_param, mut n_probe, mut probe) = ("poisson".to_string(), None, 1, ProbeKind::Rademacher);
        let mut exact = false;
        for (k, v) in pairs {
            let v = v.as_str();
            let t = &mut c.train;
            match k.as_str() {
                "d" => c.d = num(k, v)?,
                "out_density" => c.out_density = num(k, v)?,
                "confounder_ratio" => c.confounder_ratio = num(k, v)?,
                "sem" => c.sem = v.parse().map_err(|e| anyhow!("config key `sem`: {e}"))?,
                "contractive" => c.contractive = flag(k, v)?,
                "contractive_norm" => c.contractive_norm = num(k, v)?,
                "max_noise_std" => c.max_noise_std = num(k, v)?,
                "intervention_std" => c.intervention_std = num(k, v)?,
                "samples_per_regime" => c.samples_per_regime = num(k, v)?,
                "interventions" => c.interventions = if v == "all" { None } else { Some(num(k, v)?) },
                "observational" => c.observational = flag(k, v)?,
                "holdout" => c.holdout = num(k, v)?,
                "learning_rate" => t.learning_rate = num(k, v)?,
                "lambda_sparsity" => t.lambda_sparsity = num(k, v)?,
                "rho_glasso" => t.rho_glasso = num(k, v)?,
                "gumbel_temperature" => t.gumbel_temperature = num(k, v)?,
                "temperature_decay" => t.temperature_decay = num(k, v)?,
                "batch_size" => t.batch_size = num(k, v)?,
                "epochs" => t.epochs = num(k, v)?,
                "logdet" => {
                    exact = match v {
                        "exact" => true,
                        "stochastic" => false,
                        _ => bail!("config key `logdet`: expected exact or stochastic, got `{v}`"),
                    }
                }
                "truncation" => truncation = v.to_string(),
                "truncation_param" => truncation_param = Some(num::<f64>(k, v)?),
                "n_probe" => n_probe = num(k, v)?,
                "probe" => {
                    probe = match v {
                        "rademacher" => ProbeKind::Rademacher,
                        "gaussian" => ProbeKind::Gaussian,
                        _ => bail!("config key `probe`: expected rademacher or gaussian, got `{v}`"),
                    }
                }
                "edge_threshold" => t.edge_threshold = num(k, v)?,
                "cov_threshold" => t.cov_threshold = num(k, v)?,
                "hidden" => {
                    t.hidden = if v.is_empty() {
                        Vec::new()
                    } else {
                        v.split('x').map(|w| num(k, w)).collect::<Result<_>>()?
                    }
                }
                "activation" => {
                    t.activation = match v {
                        "tanh" => Activation::Tanh,
                        "identity" | "linear" => Activation::Identity,
                        _ => bail!("config key `activation`: expected tanh or identity, got `{v}`"),
                    }
                }
                "lipschitz_cap" => t.lipschitz_cap = num(k, v)?,
                "freeze_gz" => t.freeze_gz = flag(k, v)?,
                "precondition" => t.precondition = flag(k, v)?,
                "max_solver_failures" => t.max_solver_failures = num(k, v)?,
                "seeds" => {}
                other => bail!("unknown config key `{other}`"),
            }
        }
        c.train.logdet = if exact {
            LogDetMode::Exact
        } else {
            let truncation = match truncation.as_str() {
                "poisson" => TruncationDistribution::Poisson { rate: truncation_param.unwrap_or(2.0) },
                "geometric" => TruncationDistribution::Geometric { p: truncation_param.unwrap_or(0.5) },
                other => bail!("config key `truncation`: expected poisson or geometric, got `{other}`"),
            };
            LogDetMode::Stochastic(LogDetEstimator { truncation, n_probe, probe })
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            bail!("d must be at least 2, got {}", self.d);
        }
        if self.samples_per_regime == 0 {
            bail!("samples_per_regime must be positive");
        }
        if !(0.0..1.0).contains(&self.holdout) {
            bail!("holdout must lie in [0, 1), got {}", self.holdout);
        }
        if self.interventions.is_some_and(|k| k > self.d) {
            bail!("interventions ({}) exceeds d ({})", self.interventions.unwrap(), self.d);
        }
        if !self.observational && self.interventions == Some(0) {
            bail!("no regimes: observational=false and interventions=0");
        }
        self.train.validate().context("training settings")?;
        Ok(())
    }

    pub fn benchmark(&self) -> BenchmarkSpec {
        BenchmarkSpec {
            d: self.d,
            out_density: self.out_density,
            confounder_ratio: self.confounder_ratio,
            nonlinearity: self.sem,
            contractive_norm: self.contractive.then_some(self.contractive_norm),
            max_noise_std: self.max_noise_std,
            intervention_std: self.intervention_std,
            samples_per_regime: self.samples_per_regime,
            n_interventions: self.interventions.unwrap_or(self.d),
            observational: self.observational,
        }
    }

    /// Training settings for one seed.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }

    /// Canonical `key=value` listing of every setting.
    pub fn canonical(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("d", self.d.to_string());
        put("out_density", self.out_density.to_string());
        put("confounder_ratio", self.confounder_ratio.to_string());
        put("sem", self.sem.to_string());
        put("contractive", self.contractive.to_string());
        put("contractive_norm", self.contractive_norm.to_string());
        put("max_noise_std", self.max_noise_std.to_string());
        put("intervention_std", self.intervention_std.to_string());
        put("samples_per_regime", self.samples_per_regime.to_string());
        put("interventions", self.interventions.map_or("all".into(), |k| k.to_string()));
        put("observational", self.observational.to_string());
        put("holdout", self.holdout.to_string());
        put("learning_rate", t.learning_rate.to_string());
        put("lambda_sparsity", t.lambda_sparsity.to_string());
        put("rho_glasso", t.rho_glasso.to_string());
        put("gumbel_temperature", t.gumbel_temperature.to_string());
        put("temperature_decay", t.temperature_decay.to_string());
        put("batch_size", t.batch_size.to_string());
        put("epochs", t.epochs.to_string());
        match &t.logdet {
            LogDetMode::Exact => put("logdet", "exact".into()),
            LogDetMode::Stochastic(e) => {
                put("logdet", "stochastic".into());
                let (name, p) = match e.truncation {
                    TruncationDistribution::Poisson { rate } => ("poisson", rate),
                    TruncationDistribution::Geometric { p } => ("geometric", p),
                };
                put("truncation", name.into());
                put("truncation_param", p.to_string());
                put("n_probe", e.n_probe.to_string());
                put("probe", match e.probe {
                    ProbeKind::Rademacher => "rademacher".into(),
                    ProbeKind::Gaussian => "gaussian".into(),
                });
            }
        }
        put("edge_threshold", t.edge_threshold.to_string());
        put("cov_threshold", t.cov_threshold.to_string());
        put("hidden", t.hidden.iter().map(|w| w.to_string()).collect::<Vec<_>>().join("x"));
        put("activation", match t.activation {
            Activation::Tanh => "tanh".into(),
            Activation::Identity => "identity".into(),
        });
        put("lipschitz_cap", t.lipschitz_cap.to_string());
        put("freeze_gz", t.freeze_gz.to_string());
        put("precondition", t.precondition.to_string());
        put("max_solver_failures", t.max_solver_failures.to_string());
        s
    }

    /// First 16 hex digits of the SHA-256 of [`Self::canonical`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Seeds listed under `seeds`, or `0..5`.
pub fn seeds(pairs: &Pairs) -> Result<Vec<u64>> {
    match pairs.get("seeds") {
        None => Ok((0..5).collect()),
        Some(v) => {
            let s: Vec<u64> = v.split(',').map(|x| num("seeds", x.trim())).collect::<Result<_>>()?;
            if s.is_empty() {
                bail!("seeds list is empty");
            }
            Ok(s)
        }
    }
}

/// Cross product of comma-separated values; keys keep their sorted order.
pub fn expand_grid(pairs: &Pairs) -> Result<Vec<(Pairs, Vec<(String, String)>)>> {
    let mut cells: Vec<(Pairs, Vec<(String, String)>)> = vec![(Pairs::new(), Vec::new())];
    for (k, v) in pairs {
        if k == "seeds" {
            continue;
        }
        let values: Vec<&str> = v.split(',').map(str::trim).collect();
        if values.iter().any(|x| x.is_empty()) && values.len() > 1 {
            bail!("config key `{k}`: empty entry in value list `{v}`");
        }
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for (base, axes) in &cells {
            for &x in &values {
                let mut p = base.clone();
                p.insert(k.clone(), x.to_string());
                let mut a = axes.clone();
                if values.len() > 1 {
                    a.push((k.clone(), x.to_string()));
                }
                next.push((p, a));
            }
        }
        cells = next;
    }
    Ok(cells)
}
