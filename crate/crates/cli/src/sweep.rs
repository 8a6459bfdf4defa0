use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use crate::commands::{evaluate_model, fit, simulate, split, Evaluation};
use crate::config::{expand_grid, seeds, ExperimentConfig, Pairs};

struct Cell {
    index: usize,
    axes: String,
    config: ExperimentConfig,
}

struct Run {
    cell: usize,
    seed: u64,
    outcome: Result<Evaluation>,
}

/// Simulate, train and evaluate one (cell, seed).
fn run_one(cfg: &ExperimentConfig, seed: u64) -> Result<Evaluation> {
    let (spec, data) = simulate(cfg, seed)?;
    let (train, test) = split(cfg, &data, seed);
    let out = fit(cfg, &train, seed)?;
    evaluate_model(cfg, seed, &out.model, Some(&spec), &test)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Runs every grid cell for every seed and writes one row per run plus one
/// aggregate row (mean and sample standard deviation over successful runs) per cell.
/// Failed runs are recorded with their error and do not stop the sweep.
pub fn sweep(grid: &Pairs, out: &Path) -> Result<()> {
    if grid.is_empty() {
        bail!("sweep grid is empty");
    }
    let seeds = seeds(grid)?;
    let cells: Vec<Cell> = expand_grid(grid)?
        .into_iter()
        .enumerate()
        .map(|(index, (pairs, axes))| {
            let config = ExperimentConfig::from_pairs(&pairs).with_context(|| format!("grid cell {index}"))?;
            let axes = axes.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";");
            Ok(Cell { index, axes, config })
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, u64)> = cells.iter().flat_map(|c| seeds.iter().map(move |&s| (c.index, s))).collect();
    let started = Instant::now();
    let runs: Vec<Run> = jobs
        .par_iter()
        .map(|&(cell, seed)| {
            let t = Instant::now();
            let outcome = run_one(&cells[cell].config, seed);
            eprintln!(
                "cell {cell} seed {seed}: {} in {:.1}s",
                if outcome.is_ok() { "ok" } else { "failed" },
                t.elapsed().as_secs_f64()
            );
            Run { cell, seed, outcome }
        })
        .collect();

    let mut w = csv::Writer::from_path(out).with_context(|| format!("creating {}", out.display()))?;
    let mut header = vec!["row_type", "cell", "axes", "config_hash", "seed", "d", "confounder_ratio", "interventions", "status", "n_ok"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    header.extend(Evaluation::COLUMNS.iter().map(|c| c.to_string()));
    header.extend(Evaluation::COLUMNS.iter().map(|c| format!("{c}_std")));
    w.write_record(&header)?;
    let blanks = vec![String::new(); Evaluation::COLUMNS.len()];
    for cell in &cells {
        let c = &cell.config;
        let prefix = |row_type: &str, seed: String, status: String, n_ok: String| {
            vec![
                row_type.to_string(),
                cell.index.to_string(),
                cell.axes.clone(),
                c.hash(),
                seed,
                c.d.to_string(),
                c.confounder_ratio.to_string(),
                c.interventions.unwrap_or(c.d).to_string(),
                status,
                n_ok,
            ]
        };
        let mine: Vec<&Run> = runs.iter().filter(|r| r.cell == cell.index).collect();
        for r in &mine {
            let (status, values) = match &r.outcome {
                Ok(e) => ("ok".to_string(), e.values()),
                Err(e) => (format!("error: {e:#}"), blanks.clone()),
            };
            let mut row = prefix("run", r.seed.to_string(), status, String::new());
            row.extend(values);
            row.extend(blanks.iter().cloned());
            w.write_record(&row)?;
        }
        let ok: Vec<Vec<Option<f64>>> = mine.iter().filter_map(|r| r.outcome.as_ref().ok().map(Evaluation::numbers)).collect();
        let mut means = Vec::new();
        let mut stds = Vec::new();
        for col in 0..Evaluation::COLUMNS.len() {
            let xs: Vec<f64> = ok.iter().filter_map(|v| v[col]).collect();
            if xs.is_empty() {
                means.push(String::new());
                stds.push(String::new());
            } else {
                let (m, s) = mean_std(&xs);
                means.push(m.to_string());
                stds.push(s.to_string());
            }
        }
        let status = if ok.is_empty() { "failed" } else { "ok" };
        let mut row = prefix("aggregate", "all".into(), status.into(), ok.len().to_string());
        row.extend(means);
        row.extend(stds);
        w.write_record(&row)?;
    }
    w.flush().with_context(|| format!("writing {}", out.display()))?;
    eprintln!(
        "{} cells x {} seeds in {:.1}s; results in {}",
        cells.len(),
        seeds.len(),
        started.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}
