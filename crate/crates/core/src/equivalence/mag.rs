use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use super::{acyclify, augment, steps};
use crate::error::{Error, Result};
use crate::graphs::{DirectedMixedGraph, InterventionFamily, VertexSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mark {
    Tail,
    Arrow,
}

/// Graph with at most one edge per pair and a mark at each endpoint.
#[derive(Clone, PartialEq, Eq)]
pub struct AncestralGraph {
    d: usize,
    /// `marks[i * d + j]` is the mark at `i` of the edge between `i` and `j`.
    marks: Vec<Option<Mark>>,
}

impl AncestralGraph {
    pub fn empty(d: usize) -> Self {
        AncestralGraph { d, marks: vec![None; d * d] }
    }

    pub fn num_vertices(&self) -> usize {
        self.d
    }

    /// Sets the edge between `i` and `j`, replacing any existing one.
    pub fn set_edge(&mut self, i: usize, at_i: Mark, j: usize, at_j: Mark) -> Result<()> {
        if i >= self.d || j >= self.d || i == j {
            return Err(Error::InvalidArgument(format!("bad edge ({i}, {j}) for d={}", self.d)));
        }
        self.marks[i * self.d + j] = Some(at_i);
        self.marks[j * self.d + i] = Some(at_j);
        Ok(())
    }

    /// Mark at `i` of the edge `i *-* j`, if any.
    pub fn mark(&self, i: usize, j: usize) -> Option<Mark> {
        self.marks[i * self.d + j]
    }

    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.mark(i, j).is_some()
    }

    /// `i -> j`.
    pub fn is_directed(&self, i: usize, j: usize) -> bool {
        self.mark(i, j) == Some(Mark::Tail) && self.mark(j, i) == Some(Mark::Arrow)
    }

    pub fn is_bidirected(&self, i: usize, j: usize) -> bool {
        self.mark(i, j) == Some(Mark::Arrow) && self.mark(j, i) == Some(Mark::Arrow)
    }

    pub fn num_edges(&self) -> usize {
        self.marks.iter().filter(|m| m.is_some()).count() / 2
    }

    /// Unordered adjacent pairs `(i, j)` with `i < j`.
    pub fn skeleton(&self) -> BTreeSet<(usize, usize)> {
        let d = self.d;
        (0..d)
            .flat_map(|i| ((i + 1)..d).map(move |j| (i, j)))
            .filter(|&(i, j)| self.adjacent(i, j))
            .collect()
    }

    /// Directed and bidirected edges as a mixed graph; fails on tail-tail edges.
    pub fn to_mixed_graph(&self) -> Result<DirectedMixedGraph> {
        let mut g = DirectedMixedGraph::empty(self.d);
        for (i, j) in self.skeleton() {
            match (self.mark(i, j).unwrap(), self.mark(j, i).unwrap()) {
                (Mark::Tail, Mark::Arrow) => g.add_directed(i, j)?,
                (Mark::Arrow, Mark::Tail) => g.add_directed(j, i)?,
                (Mark::Arrow, Mark::Arrow) => g.add_bidirected(i, j)?,
                (Mark::Tail, Mark::Tail) => {
                    return Err(Error::InvalidArgument(format!("undirected edge {i} --- {j}")));
                }
            }
        }
        Ok(g)
    }

    /// No directed cycle, and no `i <-> j` with `i` an ancestor of `j`.
    pub fn is_ancestral(&self) -> bool {
        let Ok(g) = self.to_mixed_graph() else {
            return false;
        };
        if !g.is_acyclic() {
            return false;
        }
        let reach = g.reachability();
        g.bidirected_edges()
            .iter()
            .all(|&(i, j)| !reach[i * self.d + j] && !reach[j * self.d + i])
    }

    /// No inducing path between non-adjacent vertices.
    pub fn is_maximal(&self) -> bool {
        let Ok(g) = self.to_mixed_graph() else {
            return false;
        };
        (0..self.d).all(|i| ((i + 1)..self.d).all(|j| self.adjacent(i, j) || !has_inducing_path(&g, i, j)))
    }
}

impl fmt::Debug for AncestralGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AncestralGraph {{ {} }}", self.to_string().trim_end().replace('\n', "; "))
    }
}

/// `d=<n>` header, then one `i <m>-<m> j` line per edge: `0 --> 1`, `0 <-> 1`, `0 --- 1`.
impl fmt::Display for AncestralGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "d={}", self.d)?;
        for (i, j) in self.skeleton() {
            let left = if self.mark(i, j) == Some(Mark::Arrow) { '<' } else { '-' };
            let right = if self.mark(j, i) == Some(Mark::Arrow) { '>' } else { '-' };
            writeln!(f, "{i} {left}-{right} {j}")?;
        }
        Ok(())
    }
}

impl FromStr for AncestralGraph {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| Error::parse("ancestral graph", "missing `d=<n>` header"))?;
        let d: usize = header
            .strip_prefix("d=")
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| Error::parse("ancestral graph", format!("bad header `{header}`")))?;
        let mut g = AncestralGraph::empty(d);
        for line in lines {
            let bad = || Error::parse("ancestral graph", format!("bad edge `{line}`"));
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [i, edge, j] = parts[..] else {
                return Err(bad());
            };
            let (i, j): (usize, usize) = (i.parse().map_err(|_| bad())?, j.parse().map_err(|_| bad())?);
            let at_i = match edge {
                "-->" | "---" => Mark::Tail,
                "<->" | "<--" => Mark::Arrow,
                _ => return Err(bad()),
            };
            let at_j = if edge.ends_with('>') { Mark::Arrow } else { Mark::Tail };
            g.set_edge(i, at_i, j, at_j)?;
        }
        Ok(g)
    }
}

/// Inducing path relative to ∅: every interior vertex is a collider and an
/// ancestor of `i` or `j`. Interior colliders force bidirected interior edges, so
/// this is a component query on the bidirected part restricted to `an({i, j})`.
pub(crate) fn has_inducing_path(g: &DirectedMixedGraph, i: usize, j: usize) -> bool {
    let d = g.num_vertices();
    if steps(g, i).iter().any(|s| s.to == j) {
        return true;
    }
    let anc = g.ancestors(&VertexSet::from([i, j]));
    let allowed: Vec<bool> = (0..d).map(|v| v != i && v != j && anc.contains(&v)).collect();
    let mut comp = vec![usize::MAX; d];
    for s in 0..d {
        if !allowed[s] || comp[s] != usize::MAX {
            continue;
        }
        comp[s] = s;
        let mut stack = vec![s];
        while let Some(v) = stack.pop() {
            for w in 0..d {
                if allowed[w] && comp[w] == usize::MAX && g.has_bidirected(v, w) {
                    comp[w] = s;
                    stack.push(w);
                }
            }
        }
    }
    let entered = |from: usize| -> BTreeSet<usize> {
        steps(g, from).iter().filter(|s| s.arrow_there && allowed[s.to]).map(|s| comp[s.to]).collect()
    };
    !entered(i).is_disjoint(&entered(j))
}

/// MAG of an acyclic mixed graph: adjacency by inducing paths, orientation by ancestry.
pub fn mag_of(admg: &DirectedMixedGraph) -> Result<AncestralGraph> {
    if !admg.is_acyclic() {
        return Err(Error::InvalidArgument("MAG construction needs an acyclic graph".into()));
    }
    let d = admg.num_vertices();
    let reach = admg.reachability();
    let mut m = AncestralGraph::empty(d);
    for i in 0..d {
        for j in (i + 1)..d {
            if !has_inducing_path(admg, i, j) {
                continue;
            }
            if reach[i * d + j] {
                m.set_edge(i, Mark::Tail, j, Mark::Arrow)?;
            } else if reach[j * d + i] {
                m.set_edge(i, Mark::Arrow, j, Mark::Tail)?;
            } else {
                m.set_edge(i, Mark::Arrow, j, Mark::Arrow)?;
            }
        }
    }
    Ok(m)
}

/// Triples `(a, b, c)` with `a < c` non-adjacent and both edges arrow-marked at `b`.
pub fn unshielded_colliders(ag: &AncestralGraph) -> BTreeSet<(usize, usize, usize)> {
    let d = ag.num_vertices();
    let mut out = BTreeSet::new();
    for b in 0..d {
        let into: Vec<usize> = (0..d).filter(|&a| ag.mark(b, a) == Some(Mark::Arrow)).collect();
        for (k, &a) in into.iter().enumerate() {
            for &c in &into[k + 1..] {
                if !ag.adjacent(a, c) {
                    out.insert((a, b, c));
                }
            }
        }
    }
    out
}

fn collider_at(ag: &AncestralGraph, prev: usize, v: usize, next: usize) -> bool {
    ag.mark(v, prev) == Some(Mark::Arrow) && ag.mark(v, next) == Some(Mark::Arrow)
}

/// Discriminating paths for `b`, each listed as `[i_0, ..., b, i_n]`: at least three
/// edges, `i_0` and `i_n` non-adjacent, every vertex strictly between `i_0` and `b`
/// a collider on the path and a parent of `i_n`.
pub fn discriminating_paths(ag: &AncestralGraph, b: usize) -> Vec<Vec<usize>> {
    let d = ag.num_vertices();
    let mut out = Vec::new();
    for end in (0..d).filter(|&e| ag.adjacent(b, e)) {
        // reversed partial path: b, q_1, q_2, ... walking away from `end`
        let mut rev = vec![b];
        extend_discriminating(ag, end, &mut rev, &mut out);
    }
    out.sort();
    out
}

fn extend_discriminating(ag: &AncestralGraph, end: usize, rev: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    let d = ag.num_vertices();
    let cur = *rev.last().unwrap();
    for x in 0..d {
        if x == end || rev.contains(&x) || !ag.adjacent(cur, x) {
            continue;
        }
        if rev.len() >= 2 {
            // `cur` becomes interior: collider between its neighbours and a parent of `end`
            let prev = rev[rev.len() - 2];
            if !collider_at(ag, prev, cur, x) || !ag.is_directed(cur, end) {
                continue;
            }
        }
        if !ag.adjacent(x, end) {
            if rev.len() >= 2 {
                let mut path: Vec<usize> = rev.iter().rev().copied().collect();
                path.insert(0, x);
                path.push(end);
                out.push(path);
            }
            continue;
        }
        rev.push(x);
        extend_discriminating(ag, end, rev, out);
        rev.pop();
    }
}

/// Discrepancy counts between the MAGs of two context-augmented, acyclified graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ModifiedShd {
    /// Pairs adjacent in exactly one MAG.
    pub skeleton: usize,
    /// Unshielded colliders present in exactly one MAG.
    pub colliders: usize,
    /// Paths discriminating in both MAGs whose discriminated vertex is a collider in only one.
    pub discriminating: usize,
}

impl ModifiedShd {
    pub fn total(&self) -> usize {
        self.skeleton + self.colliders + self.discriminating
    }
}

fn family_mag(g: &DirectedMixedGraph, family: &InterventionFamily) -> Result<AncestralGraph> {
    mag_of(&acyclify(augment(g, family)?.graph()))
}

pub fn modified_shd_parts(
    g1: &DirectedMixedGraph,
    g2: &DirectedMixedGraph,
    family: &InterventionFamily,
) -> Result<ModifiedShd> {
    if g1.num_vertices() != g2.num_vertices() {
        return Err(Error::DimensionMismatch { expected: g1.num_vertices(), got: g2.num_vertices() });
    }
    let m1 = family_mag(g1, family)?;
    let m2 = family_mag(g2, family)?;
    let skeleton = m1.skeleton().symmetric_difference(&m2.skeleton()).count();
    let colliders = unshielded_colliders(&m1).symmetric_difference(&unshielded_colliders(&m2)).count();
    let mut discriminating = 0;
    for b in 0..m1.num_vertices() {
        let p1: BTreeSet<Vec<usize>> = discriminating_paths(&m1, b).into_iter().collect();
        for path in discriminating_paths(&m2, b).iter().filter(|p| p1.contains(*p)) {
            let k = path.len() - 2;
            let (prev, next) = (path[k - 1], path[k + 1]);
            if collider_at(&m1, prev, b, next) != collider_at(&m2, prev, b, next) {
                discriminating += 1;
            }
        }
    }
    Ok(ModifiedShd { skeleton, colliders, discriminating })
}

pub fn modified_shd(g1: &DirectedMixedGraph, g2: &DirectedMixedGraph, family: &InterventionFamily) -> Result<usize> {
    Ok(modified_shd_parts(g1, g2, family)?.total())
}

pub fn i_markov_equivalent(g1: &DirectedMixedGraph, g2: &DirectedMixedGraph, family: &InterventionFamily) -> Result<bool> {
    Ok(modified_shd(g1, g2, family)? == 0)
}
