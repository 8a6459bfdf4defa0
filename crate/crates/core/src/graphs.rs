//! Directed mixed graphs: directed edges for causal mechanisms, bidirected
//! edges for latent confounding. Cycles are allowed.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::error::{Error, Result};

pub type VertexSet = BTreeSet<usize>;

/// Dense mixed graph over `d` vertices.
///
/// `directed(i, j)` means `i -> j`; `bidirected` is kept symmetric.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct DirectedMixedGraph {
    d: usize,
    directed: Vec<bool>,
    bidirected: Vec<bool>,
}

impl DirectedMixedGraph {
    pub fn empty(d: usize) -> Self {
        DirectedMixedGraph {
            d,
            directed: vec![false; d * d],
            bidirected: vec![false; d * d],
        }
    }

    pub fn from_edges(
        d: usize,
        directed: &[(usize, usize)],
        bidirected: &[(usize, usize)],
    ) -> Result<Self> {
        let mut g = Self::empty(d);
        for &(i, j) in directed {
            g.add_directed(i, j)?;
        }
        for &(i, j) in bidirected {
            g.add_bidirected(i, j)?;
        }
        Ok(g)
    }

    pub fn num_vertices(&self) -> usize {
        self.d
    }

    fn check_pair(&self, i: usize, j: usize) -> Result<()> {
        if i >= self.d || j >= self.d {
            return Err(Error::InvalidArgument(format!(
                "edge ({i}, {j}) out of range for d={}",
                self.d
            )));
        }
        if i == j {
            return Err(Error::InvalidArgument(format!("self-loop at vertex {i}")));
        }
        Ok(())
    }

    pub fn add_directed(&mut self, i: usize, j: usize) -> Result<()> {
        self.check_pair(i, j)?;
        self.directed[i * self.d + j] = true;
        Ok(())
    }

    pub fn remove_directed(&mut self, i: usize, j: usize) {
        self.directed[i * self.d + j] = false;
    }

    pub fn add_bidirected(&mut self, i: usize, j: usize) -> Result<()> {
        self.check_pair(i, j)?;
        self.bidirected[i * self.d + j] = true;
        self.bidirected[j * self.d + i] = true;
        Ok(())
    }

    pub fn remove_bidirected(&mut self, i: usize, j: usize) {
        self.bidirected[i * self.d + j] = false;
        self.bidirected[j * self.d + i] = false;
    }

    #[inline]
    pub fn has_directed(&self, i: usize, j: usize) -> bool {
        self.directed[i * self.d + j]
    }

    #[inline]
    pub fn has_bidirected(&self, i: usize, j: usize) -> bool {
        self.bidirected[i * self.d + j]
    }

    /// Any edge of any kind between `i` and `j`.
    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.has_directed(i, j) || self.has_directed(j, i) || self.has_bidirected(i, j)
    }

    pub fn parents(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.d).filter(move |&j| self.has_directed(j, i))
    }

    pub fn children(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.d).filter(move |&j| self.has_directed(i, j))
    }

    pub fn spouses(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.d).filter(move |&j| self.has_bidirected(i, j))
    }

    pub fn directed_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.d {
            for j in 0..self.d {
                if self.has_directed(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Bidirected edges as unordered pairs with `i < j`.
    pub fn bidirected_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.d {
            for j in (i + 1)..self.d {
                if self.has_bidirected(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn num_directed(&self) -> usize {
        self.directed.iter().filter(|&&b| b).count()
    }

    pub fn num_bidirected(&self) -> usize {
        self.bidirected.iter().filter(|&&b| b).count() / 2
    }

    /// Row-major boolean adjacency of the directed part.
    pub fn directed_matrix(&self) -> &[bool] {
        &self.directed
    }

    /// Checks the representation invariants (no self loops, symmetric bidirected part).
    pub fn is_valid(&self) -> bool {
        let d = self.d;
        (0..d).all(|i| !self.has_directed(i, i) && !self.has_bidirected(i, i))
            && (0..d).all(|i| (0..d).all(|j| self.has_bidirected(i, j) == self.has_bidirected(j, i)))
    }

    pub fn ancestors(&self, set: &VertexSet) -> VertexSet {
        self.closure(set, |g, v, w| g.has_directed(w, v))
    }

    pub fn descendants(&self, set: &VertexSet) -> VertexSet {
        self.closure(set, |g, v, w| g.has_directed(v, w))
    }

    fn closure(&self, set: &VertexSet, step: impl Fn(&Self, usize, usize) -> bool) -> VertexSet {
        let mut seen = vec![false; self.d];
        let mut stack: Vec<usize> = set.iter().copied().filter(|&v| v < self.d).collect();
        for &v in &stack {
            seen[v] = true;
        }
        while let Some(v) = stack.pop() {
            for w in 0..self.d {
                if !seen[w] && step(self, v, w) {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        (0..self.d).filter(|&v| seen[v]).collect()
    }

    /// Partition into strongly connected components of the directed part,
    /// in order of their smallest member.
    pub fn strongly_connected_components(&self) -> Vec<VertexSet> {
        let labels = self.component_labels();
        let count = labels.iter().copied().max().map_or(0, |m| m + 1);
        let mut comps = vec![VertexSet::new(); count];
        for (v, &c) in labels.iter().enumerate() {
            comps[c].insert(v);
        }
        comps
    }

    /// Component index for every vertex; components are numbered by their smallest member.
    pub fn component_labels(&self) -> Vec<usize> {
        let reach = self.reachability();
        let d = self.d;
        let mut labels = vec![usize::MAX; d];
        let mut next = 0;
        for v in 0..d {
            if labels[v] != usize::MAX {
                continue;
            }
            for w in v..d {
                if w == v || (reach[v * d + w] && reach[w * d + v]) {
                    labels[w] = next;
                }
            }
            next += 1;
        }
        labels
    }

    /// `reach[i * d + j]` is true when a directed path of length >= 1 runs from i to j.
    pub fn reachability(&self) -> Vec<bool> {
        let d = self.d;
        let mut reach = vec![false; d * d];
        for s in 0..d {
            let mut stack: Vec<usize> = self.children(s).collect();
            while let Some(v) = stack.pop() {
                if reach[s * d + v] {
                    continue;
                }
                reach[s * d + v] = true;
                stack.extend(self.children(v).filter(|&w| !reach[s * d + w]));
            }
        }
        reach
    }

    pub fn is_acyclic(&self) -> bool {
        self.topological_order().is_some()
    }

    /// Kahn ordering of the directed part, `None` on a directed cycle.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let d = self.d;
        let mut indeg: Vec<usize> = (0..d).map(|i| self.parents(i).count()).collect();
        let mut ready: Vec<usize> = (0..d).rev().filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(d);
        while let Some(v) = ready.pop() {
            order.push(v);
            for w in (0..d).rev() {
                if self.has_directed(v, w) {
                    indeg[w] -= 1;
                    if indeg[w] == 0 {
                        ready.push(w);
                    }
                }
            }
        }
        (order.len() == d).then_some(order)
    }

    /// Copy with every edge pointing into a vertex of `targets` removed, bidirected ones included.
    pub fn mutilate(&self, targets: &VertexSet) -> Self {
        let mut g = self.clone();
        for &t in targets {
            for j in 0..self.d {
                g.remove_directed(j, t);
                g.remove_bidirected(j, t);
            }
        }
        g
    }

    pub fn to_edge_list(&self) -> String {
        self.to_string()
    }

    pub fn parse_edge_list(text: &str) -> Result<Self> {
        text.parse()
    }
}

impl fmt::Debug for DirectedMixedGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DirectedMixedGraph")
            .field("d", &self.d)
            .field("directed", &self.directed_edges())
            .field("bidirected", &self.bidirected_edges())
            .finish()
    }
}

impl fmt::Display for DirectedMixedGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "d={}", self.d)?;
        for (i, j) in self.directed_edges() {
            writeln!(f, "{i} -> {j}")?;
        }
        for (i, j) in self.bidirected_edges() {
            writeln!(f, "{i} <-> {j}")?;
        }
        Ok(())
    }
}

impl FromStr for DirectedMixedGraph {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| Error::parse("edge list", "missing `d=<n>` header"))?;
        let d: usize = header
            .strip_prefix("d=")
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| Error::parse("edge list", format!("bad header `{header}`")))?;
        let mut g = Self::empty(d);
        for line in lines {
            let (kind, parts) = if let Some((a, b)) = line.split_once("<->") {
                (true, (a, b))
            } else if let Some((a, b)) = line.split_once("->") {
                (false, (a, b))
            } else {
                return Err(Error::parse("edge list", format!("bad edge `{line}`")));
            };
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::parse("edge list", format!("`{line}`: {e}")))
            };
            let (i, j) = (parse(parts.0)?, parse(parts.1)?);
            if kind {
                g.add_bidirected(i, j)?;
            } else {
                g.add_directed(i, j)?;
            }
        }
        Ok(g)
    }
}

/// Ordered family of intervention target sets; entries may be empty (observational).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterventionFamily {
    targets: Vec<VertexSet>,
}

impl InterventionFamily {
    pub fn new(d: usize, targets: Vec<VertexSet>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::InvalidArgument(
                "intervention family must contain at least one regime".into(),
            ));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&v| v >= d) {
            return Err(Error::InvalidArgument(format!(
                "intervention target {bad} out of range for d={d}"
            )));
        }
        Ok(InterventionFamily { targets })
    }

    /// Observational regime plus one single-node intervention for each listed node.
    pub fn observational_plus_singles(d: usize, nodes: &[usize]) -> Result<Self> {
        let mut targets = vec![VertexSet::new()];
        targets.extend(nodes.iter().map(|&v| VertexSet::from([v])));
        Self::new(d, targets)
    }

    pub fn targets(&self) -> &[VertexSet] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Erdős–Rényi mixed graph: each ordered pair carries `i -> j` with probability
/// `out_density / (d - 1)`, and `n_confounders` distinct unordered pairs carry `i <-> j`.
pub fn generate_er_dmg<R: Rng + ?Sized>(
    d: usize,
    out_density: f64,
    n_confounders: usize,
    rng: &mut R,
) -> Result<DirectedMixedGraph> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!(
            "random graphs need at least 2 vertices, got {d}"
        )));
    }
    if !(out_density > 0.0 && out_density < d as f64) {
        return Err(Error::InvalidArgument(format!(
            "out_density must lie in (0, {d}), got {out_density}"
        )));
    }
    let pairs = d * (d - 1) / 2;
    if n_confounders > pairs {
        return Err(Error::InvalidArgument(format!(
            "{n_confounders} confounded pairs requested but only {pairs} exist"
        )));
    }
    let p = (out_density / (d - 1) as f64).min(1.0);
    let mut g = DirectedMixedGraph::empty(d);
    for i in 0..d {
        for j in 0..d {
            if i != j && rng.random::<f64>() < p {
                g.add_directed(i, j)?;
            }
        }
    }
    add_random_confounders(&mut g, n_confounders, rng);
    Ok(g)
}

/// Acyclic variant: directed edges only go forward in a random vertex order.
/// The edge probability is doubled so the expected out-degree stays `out_density`.
pub fn generate_er_dag<R: Rng + ?Sized>(
    d: usize,
    out_density: f64,
    n_confounders: usize,
    rng: &mut R,
) -> Result<DirectedMixedGraph> {
    let cyclic = generate_er_dmg(d, out_density, n_confounders, rng)?;
    let mut order: Vec<usize> = (0..d).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
    let mut rank = vec![0; d];
    for (r, &v) in order.iter().enumerate() {
        rank[v] = r;
    }
    let p = (2.0 * out_density / (d - 1) as f64).min(1.0);
    let mut g = DirectedMixedGraph::empty(d);
    for i in 0..d {
        for j in 0..d {
            if rank[i] < rank[j] && rng.random::<f64>() < p {
                g.add_directed(i, j)?;
            }
        }
    }
    for (i, j) in cyclic.bidirected_edges() {
        g.add_bidirected(i, j)?;
    }
    Ok(g)
}

fn add_random_confounders<R: Rng + ?Sized>(g: &mut DirectedMixedGraph, n: usize, rng: &mut R) {
    let d = g.num_vertices();
    let pairs: Vec<(usize, usize)> = (0..d)
        .flat_map(|i| ((i + 1)..d).map(move |j| (i, j)))
        .collect();
    for idx in sample_indices(rng, pairs.len(), n) {
        let (i, j) = pairs[idx];
        g.bidirected[i * d + j] = true;
        g.bidirected[j * d + i] = true;
    }
}
