//! Graph recovery metrics: structural Hamming distance on directed edges, F1 on
//! bidirected pairs and area under the precision-recall curve.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graphs::DirectedMixedGraph;

/// Edits (addition, deletion, reversal) turning the directed part of `g_hat` into
/// that of `g_true`. Each unordered pair costs at most one.
pub fn shd(g_hat: &DirectedMixedGraph, g_true: &DirectedMixedGraph) -> Result<usize> {
    let d = g_true.num_vertices();
    if g_hat.num_vertices() != d {
        return Err(Error::DimensionMismatch { expected: d, got: g_hat.num_vertices() });
    }
    let mut n = 0;
    for i in 0..d {
        for j in (i + 1)..d {
            let a = (g_hat.has_directed(i, j), g_hat.has_directed(j, i));
            let b = (g_true.has_directed(i, j), g_true.has_directed(j, i));
            if a != b {
                n += 1;
            }
        }
    }
    Ok(n)
}

pub fn shd_normalized(g_hat: &DirectedMixedGraph, g_true: &DirectedMixedGraph) -> Result<f64> {
    Ok(shd(g_hat, g_true)? as f64 / g_true.num_vertices().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Zero when precision and recall are both zero.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Pairs `i < j` with `|σ̂_ij| > threshold` against the true bidirected pairs.
pub fn bidirected_counts(sigma_hat: &DMatrix<f64>, g_true: &DirectedMixedGraph, threshold: f64) -> Result<Counts> {
    let d = g_true.num_vertices();
    if sigma_hat.shape() != (d, d) {
        return Err(Error::DimensionMismatch { expected: d, got: sigma_hat.nrows() });
    }
    let mut c = Counts::default();
    for i in 0..d {
        for j in (i + 1)..d {
            match (sigma_hat[(i, j)].abs() > threshold, g_true.has_bidirected(i, j)) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(c)
}

pub fn f1_bidirected(sigma_hat: &DMatrix<f64>, g_true: &DirectedMixedGraph, threshold: f64) -> Result<f64> {
    Ok(bidirected_counts(sigma_hat, g_true, threshold)?.f1())
}

/// Area under the precision-recall step curve. Equal scores enter together, so
/// each distinct threshold contributes `Δrecall × precision`.
pub fn auprc(scored: &[(f64, bool)]) -> Result<f64> {
    let positives = scored.iter().filter(|s| s.1).count();
    if positives == 0 {
        return Err(Error::InvalidArgument("precision-recall curve needs at least one positive".into()));
    }
    if scored.iter().any(|s| s.0.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut seen, mut prev_recall, mut area) = (0usize, 0usize, 0.0, 0.0);
    let mut k = 0;
    while k < sorted.len() {
        let score = sorted[k].0;
        while k < sorted.len() && sorted[k].0 == score {
            tp += sorted[k].1 as usize;
            seen += 1;
            k += 1;
        }
        let recall = tp as f64 / positives as f64;
        area += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
    }
    Ok(area)
}

/// Ordered pairs `i != j` scored by `probs[(i, j)]`, labelled by `i -> j` in `g_true`.
pub fn directed_scores(probs: &DMatrix<f64>, g_true: &DirectedMixedGraph) -> Vec<(f64, bool)> {
    let d = g_true.num_vertices();
    let mut out = Vec::with_capacity(d * d.saturating_sub(1));
    for i in 0..d {
        for j in 0..d {
            if i != j {
                out.push((probs[(i, j)], g_true.has_directed(i, j)));
            }
        }
    }
    out
}

/// Pairs `i < j` scored by `|σ̂_ij|`, labelled by `i <-> j` in `g_true`.
pub fn bidirected_scores(sigma_hat: &DMatrix<f64>, g_true: &DirectedMixedGraph) -> Vec<(f64, bool)> {
    let d = g_true.num_vertices();
    let mut out = Vec::new();
    for i in 0..d {
        for j in (i + 1)..d {
            out.push((sigma_hat[(i, j)].abs(), g_true.has_bidirected(i, j)));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub shd: usize,
    pub shd_normalized: f64,
    pub f1_bidirected: f64,
    pub bidirected: Counts,
    /// `None` when the truth has no edge of that kind.
    pub auprc_directed: Option<f64>,
    pub auprc_bidirected: Option<f64>,
}

impl MetricReport {
    /// `g_hat` is the thresholded estimate; `probs` and `sigma_hat` provide the
    /// rankings for the precision-recall curves.
    pub fn compute(
        g_hat: &DirectedMixedGraph,
        probs: &DMatrix<f64>,
        sigma_hat: &DMatrix<f64>,
        g_true: &DirectedMixedGraph,
        cov_threshold: f64,
    ) -> Result<Self> {
        let d = g_true.num_vertices();
        if probs.shape() != (d, d) {
            return Err(Error::DimensionMismatch { expected: d, got: probs.nrows() });
        }
        let shd = shd(g_hat, g_true)?;
        let bidirected = bidirected_counts(sigma_hat, g_true, cov_threshold)?;
        let curve = |s: Vec<(f64, bool)>| if s.iter().any(|x| x.1) { auprc(&s).ok() } else { None };
        Ok(MetricReport {
            shd,
            shd_normalized: shd as f64 / d.max(1) as f64,
            f1_bidirected: bidirected.f1(),
            bidirected,
            auprc_directed: curve(directed_scores(probs, g_true)),
            auprc_bidirected: curve(bidirected_scores(sigma_hat, g_true)),
        })
    }
}
