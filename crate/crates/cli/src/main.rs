//! `dccd`: generate synthetic interventional datasets, train, evaluate and sweep.

mod commands;
mod config;
mod sweep;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{parse_pairs, ExperimentConfig, Pairs};

#[derive(Parser)]
#[command(name = "dccd", version, about = "Causal discovery of cyclic models with latent confounders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for data generation, training and the hold-out split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// key=value settings applied after the config file.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate regime datasets and write them with the ground truth.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model to a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory containing a manifest.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the checkpoint, log and learned graph.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint against the dataset's ground truth and held-out split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the CSV row to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every cell of a grid config for every seed; comma-separated values are axes.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Results CSV.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_pairs(common: &Common) -> Result<Pairs> {
    let mut text = match &common.config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
        None => String::new(),
    };
    for o in &common.overrides {
        text.push('\n');
        text.push_str(o);
    }
    parse_pairs(&text)
}

fn setup_threads(common: &Common) -> Result<()> {
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn config(common: &Common) -> Result<ExperimentConfig> {
    ExperimentConfig::from_pairs(&load_pairs(common)?)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Generate { common, out } => {
            setup_threads(common)?;
            commands::generate(&config(common)?, common.seed, out)
        }
        Command::Train { common, data, out } => {
            setup_threads(common)?;
            commands::train(&config(common)?, common.seed, data, out)
        }
        Command::Evaluate { common, model, data, out } => {
            setup_threads(common)?;
            commands::evaluate(&config(common)?, common.seed, model, data, out.as_ref())
        }
        Command::Sweep { common, out } => {
            setup_threads(common)?;
            sweep::sweep(&load_pairs(common)?, Path::new(out))
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Generate { .. } => "generate",
        Command::Train { .. } => "train",
        Command::Evaluate { .. } => "evaluate",
        Command::Sweep { .. } => "sweep",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = command_name(&cli.command);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "status": "error", "command": name, "error": format!("{e:#}") });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
