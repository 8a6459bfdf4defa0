//! Acyclification, d- and σ-separation, context-augmented graphs, maximal
//! ancestral graphs and interventional Markov equivalence.

mod mag;

pub use mag::{
    discriminating_paths, i_markov_equivalent, mag_of, modified_shd, modified_shd_parts,
    unshielded_colliders, AncestralGraph, Mark, ModifiedShd,
};

use crate::error::{Error, Result};
use crate::graphs::{DirectedMixedGraph, InterventionFamily, VertexSet};

/// Endpoint marks of one edge incident to `v`, seen from `v`: (mark at v, other end).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Step {
    pub to: usize,
    pub arrow_here: bool,
    pub arrow_there: bool,
}

/// Every edge incident to `v`. Parallel edges on one pair appear separately.
pub(crate) fn steps(g: &DirectedMixedGraph, v: usize) -> Vec<Step> {
    let mut out = Vec::new();
    for w in 0..g.num_vertices() {
        if g.has_directed(v, w) {
            out.push(Step { to: w, arrow_here: false, arrow_there: true });
        }
        if g.has_directed(w, v) {
            out.push(Step { to: w, arrow_here: true, arrow_there: false });
        }
        if g.has_bidirected(v, w) {
            out.push(Step { to: w, arrow_here: true, arrow_there: true });
        }
    }
    out
}

/// `j -> i` iff `j ∈ pa(sc(i)) \ sc(i)`; `i <-> j` iff the two components share a
/// vertex or are joined by a bidirected edge.
pub fn acyclify(g: &DirectedMixedGraph) -> DirectedMixedGraph {
    let d = g.num_vertices();
    let label = g.component_labels();
    let mut out = DirectedMixedGraph::empty(d);
    let mut comp_parent = vec![false; d * d];
    let mut comp_spouse = vec![false; d * d];
    for j in 0..d {
        for i in 0..d {
            if g.has_directed(j, i) && label[j] != label[i] {
                comp_parent[j * d + label[i]] = true;
            }
            if g.has_bidirected(j, i) {
                comp_spouse[label[j] * d + label[i]] = true;
            }
        }
    }
    for i in 0..d {
        for j in 0..d {
            if i == j {
                continue;
            }
            if comp_parent[j * d + label[i]] {
                out.add_directed(j, i).expect("distinct in-range vertices");
            }
            if label[i] == label[j] || comp_spouse[label[i] * d + label[j]] {
                out.add_bidirected(i, j).expect("distinct in-range vertices");
            }
        }
    }
    out
}

pub(crate) fn check_disjoint(d: usize, a: &VertexSet, b: &VertexSet, c: &VertexSet) -> Result<()> {
    for s in [a, b, c] {
        if let Some(&v) = s.iter().find(|&&v| v >= d) {
            return Err(Error::InvalidArgument(format!("vertex {v} out of range for d={d}")));
        }
    }
    if !a.is_disjoint(b) || !a.is_disjoint(c) || !b.is_disjoint(c) {
        return Err(Error::InvalidArgument("separation sets must be pairwise disjoint".into()));
    }
    Ok(())
}

/// d-separation of `a` and `b` given `c` by reachability over (vertex, arrival mark)
/// states. Works on cyclic graphs with the ancestral collider rule.
pub fn d_separated(g: &DirectedMixedGraph, a: &VertexSet, b: &VertexSet, c: &VertexSet) -> Result<bool> {
    let d = g.num_vertices();
    check_disjoint(d, a, b, c)?;
    let anc_c = g.ancestors(c);
    let adj: Vec<Vec<Step>> = (0..d).map(|v| steps(g, v)).collect();
    // seen[2v + arrow] for arrival at v with or without an arrowhead
    let mut seen = vec![false; 2 * d];
    let mut stack = Vec::new();
    for &s in a {
        for st in &adj[s] {
            stack.push((st.to, st.arrow_there));
        }
    }
    while let Some((v, arrow_in)) = stack.pop() {
        if std::mem::replace(&mut seen[2 * v + arrow_in as usize], true) {
            continue;
        }
        if b.contains(&v) {
            return Ok(false);
        }
        for st in &adj[v] {
            let collider = arrow_in && st.arrow_here;
            let open = if collider { anc_c.contains(&v) } else { !c.contains(&v) };
            if open && !seen[2 * st.to + st.arrow_there as usize] {
                stack.push((st.to, st.arrow_there));
            }
        }
    }
    Ok(true)
}

/// σ-separation, computed as d-separation in the acyclification.
pub fn sigma_separated(g: &DirectedMixedGraph, a: &VertexSet, b: &VertexSet, c: &VertexSet) -> Result<bool> {
    check_disjoint(g.num_vertices(), a, b, c)?;
    d_separated(&acyclify(g), a, b, c)
}

/// System graph extended with one parentless, spouseless context vertex per
/// non-empty target set, pointing into exactly that set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedGraph {
    graph: DirectedMixedGraph,
    system_dim: usize,
}

impl AugmentedGraph {
    /// Full graph; context vertices come after the `system_dim` system vertices.
    pub fn graph(&self) -> &DirectedMixedGraph {
        &self.graph
    }

    pub fn system_dim(&self) -> usize {
        self.system_dim
    }

    pub fn num_context(&self) -> usize {
        self.graph.num_vertices() - self.system_dim
    }

    pub fn context_vertices(&self) -> std::ops::Range<usize> {
        self.system_dim..self.graph.num_vertices()
    }
}

pub fn augment(g: &DirectedMixedGraph, family: &InterventionFamily) -> Result<AugmentedGraph> {
    let d = g.num_vertices();
    if let Some(&v) = family.targets().iter().flatten().find(|&&v| v >= d) {
        return Err(Error::InvalidArgument(format!("intervention target {v} out of range for d={d}")));
    }
    let contexts: Vec<&VertexSet> = family.targets().iter().filter(|t| !t.is_empty()).collect();
    let mut graph = DirectedMixedGraph::empty(d + contexts.len());
    for (i, j) in g.directed_edges() {
        graph.add_directed(i, j)?;
    }
    for (i, j) in g.bidirected_edges() {
        graph.add_bidirected(i, j)?;
    }
    for (k, target) in contexts.iter().enumerate() {
        for &t in *target {
            graph.add_directed(d + k, t)?;
        }
    }
    Ok(AugmentedGraph { graph, system_dim: d })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::graphs::generate_er_dmg;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn set(v: &[usize]) -> VertexSet {
        v.iter().copied().collect()
    }

    pub(crate) fn graph(d: usize, dir: &[(usize, usize)], bi: &[(usize, usize)]) -> DirectedMixedGraph {
        DirectedMixedGraph::from_edges(d, dir, bi).unwrap()
    }

    /// Vertex 0..3 stand for X1..X4.
    pub(crate) fn two_cycle_example() -> DirectedMixedGraph {
        graph(4, &[(0, 2), (1, 3), (2, 3), (3, 2)], &[])
    }

    /// Random mixed graph with a random density and confounder count.
    pub(crate) fn random_dmg(rng: &mut ChaCha8Rng, max_d: usize) -> DirectedMixedGraph {
        let d = rng.random_range(2..=max_d);
        let density = rng.random_range(0.3..(d as f64 - 1.0).clamp(0.4, 2.5));
        let pairs = d * (d - 1) / 2;
        let conf = rng.random_range(0..=pairs.min(3));
        generate_er_dmg(d, density, conf, rng).unwrap()
    }

    /// All simple paths from `a` to `b` as vertex lists with per-edge marks
    /// `(arrow at earlier vertex, arrow at later vertex)`.
    pub(crate) fn simple_paths(g: &DirectedMixedGraph, a: usize, b: usize) -> Vec<(Vec<usize>, Vec<(bool, bool)>)> {
        fn go(
            g: &DirectedMixedGraph,
            b: usize,
            nodes: &mut Vec<usize>,
            marks: &mut Vec<(bool, bool)>,
            out: &mut Vec<(Vec<usize>, Vec<(bool, bool)>)>,
        ) {
            let v = *nodes.last().unwrap();
            if v == b {
                out.push((nodes.clone(), marks.clone()));
                return;
            }
            for st in steps(g, v) {
                if nodes.contains(&st.to) {
                    continue;
                }
                nodes.push(st.to);
                marks.push((st.arrow_here, st.arrow_there));
                go(g, b, nodes, marks, out);
                nodes.pop();
                marks.pop();
            }
        }
        let mut out = Vec::new();
        go(g, b, &mut vec![a], &mut Vec::new(), &mut out);
        out
    }

    /// σ-open test of one path straight from the three blocking conditions.
    fn sigma_open(g: &DirectedMixedGraph, nodes: &[usize], marks: &[(bool, bool)], c: &VertexSet) -> bool {
        let label = g.component_labels();
        let anc_c = g.ancestors(c);
        if c.contains(&nodes[0]) || c.contains(nodes.last().unwrap()) {
            return false;
        }
        for k in 1..nodes.len() - 1 {
            let v = nodes[k];
            let into_from_left = marks[k - 1].1;
            let into_from_right = marks[k].0;
            if into_from_left && into_from_right {
                if !anc_c.contains(&v) {
                    return false;
                }
            } else if c.contains(&v) {
                // tail at v with an arrowhead at the neighbour means v points at it
                let left_out = !marks[k - 1].1 && marks[k - 1].0;
                let right_out = !marks[k].0 && marks[k].1;
                if (left_out && label[nodes[k - 1]] != label[v]) || (right_out && label[nodes[k + 1]] != label[v]) {
                    return false;
                }
            }
        }
        true
    }

    pub(crate) fn sigma_separated_by_paths(g: &DirectedMixedGraph, a: &VertexSet, b: &VertexSet, c: &VertexSet) -> bool {
        a.iter().all(|&x| {
            b.iter().all(|&y| simple_paths(g, x, y).iter().all(|(n, m)| !sigma_open(g, n, m, c)))
        })
    }

    /// d-connection of one path: colliders in an(C), non-colliders outside C.
    pub(crate) fn d_separated_by_paths(g: &DirectedMixedGraph, a: &VertexSet, b: &VertexSet, c: &VertexSet) -> bool {
        let anc_c = g.ancestors(c);
        a.iter().all(|&x| {
            b.iter().all(|&y| {
                simple_paths(g, x, y).iter().all(|(nodes, marks)| {
                    (1..nodes.len() - 1).any(|k| {
                        let v = nodes[k];
                        if marks[k - 1].1 && marks[k].0 {
                            !anc_c.contains(&v)
                        } else {
                            c.contains(&v)
                        }
                    })
                })
            })
        })
    }

    /// Every (a, b, C) with singletons a < b and C any subset of the rest.
    pub(crate) fn all_triples(d: usize) -> Vec<(VertexSet, VertexSet, VertexSet)> {
        let mut out = Vec::new();
        for a in 0..d {
            for b in (a + 1)..d {
                let rest: Vec<usize> = (0..d).filter(|&v| v != a && v != b).collect();
                for bits in 0u32..(1 << rest.len()) {
                    let c: VertexSet = rest.iter().enumerate().filter(|(k, _)| bits >> k & 1 == 1).map(|(_, &v)| v).collect();
                    out.push((set(&[a]), set(&[b]), c));
                }
            }
        }
        out
    }

    #[test]
    fn acyclify_two_cycle_example() {
        let acy = acyclify(&two_cycle_example());
        let expected = graph(4, &[(0, 2), (0, 3), (1, 2), (1, 3)], &[(2, 3)]);
        assert_eq!(acy, expected);
    }

    #[test]
    fn two_cycle_example_separations() {
        let g = two_cycle_example();
        let (a, b, c) = (set(&[0]), set(&[1]), set(&[2, 3]));
        assert!(!sigma_separated(&g, &a, &b, &c).unwrap());
        assert!(d_separated(&g, &a, &b, &c).unwrap());
        assert!(!sigma_separated_by_paths(&g, &a, &b, &c));
        assert!(d_separated_by_paths(&g, &a, &b, &c));
    }

    #[test]
    fn acyclify_fixes_dags() {
        let g = graph(4, &[(0, 1), (1, 2), (0, 3)], &[]);
        assert_eq!(acyclify(&g), g);
        let with_conf = graph(4, &[(0, 1), (1, 2)], &[(0, 3)]);
        assert_eq!(acyclify(&with_conf), with_conf);
    }

    #[test]
    fn acyclify_is_acyclic_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let g = random_dmg(&mut rng, 8);
            let acy = acyclify(&g);
            assert!(acy.topological_order().is_some());
            assert_eq!(acyclify(&acy), acy);
        }
    }

    #[test]
    fn textbook_d_separation() {
        let chain = graph(3, &[(0, 1), (1, 2)], &[]);
        assert!(d_separated(&chain, &set(&[0]), &set(&[2]), &set(&[1])).unwrap());
        assert!(!d_separated(&chain, &set(&[0]), &set(&[2]), &set(&[])).unwrap());
        let collider = graph(3, &[(0, 1), (2, 1)], &[]);
        assert!(d_separated(&collider, &set(&[0]), &set(&[2]), &set(&[])).unwrap());
        assert!(!d_separated(&collider, &set(&[0]), &set(&[2]), &set(&[1])).unwrap());
        let bi = graph(2, &[], &[(0, 1)]);
        assert!(!d_separated(&bi, &set(&[0]), &set(&[1]), &set(&[])).unwrap());
    }

    #[test]
    fn collider_opened_by_descendant() {
        let g = graph(4, &[(0, 1), (2, 1), (1, 3)], &[]);
        assert!(!d_separated(&g, &set(&[0]), &set(&[2]), &set(&[3])).unwrap());
    }

    #[test]
    fn overlapping_sets_rejected() {
        let g = graph(3, &[(0, 1)], &[]);
        assert!(sigma_separated(&g, &set(&[0]), &set(&[0]), &set(&[])).is_err());
        assert!(d_separated(&g, &set(&[0]), &set(&[1]), &set(&[1])).is_err());
        assert!(d_separated(&g, &set(&[0]), &set(&[5]), &set(&[])).is_err());
    }

    #[test]
    fn reachability_matches_path_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..60 {
            let g = random_dmg(&mut rng, 5);
            for (a, b, c) in all_triples(g.num_vertices()) {
                assert_eq!(d_separated(&g, &a, &b, &c).unwrap(), d_separated_by_paths(&g, &a, &b, &c), "{g:?} {a:?} {b:?} {c:?}");
            }
        }
    }

    #[test]
    fn sigma_matches_path_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..60 {
            let g = random_dmg(&mut rng, 5);
            for (a, b, c) in all_triples(g.num_vertices()) {
                assert_eq!(sigma_separated(&g, &a, &b, &c).unwrap(), sigma_separated_by_paths(&g, &a, &b, &c), "{g:?} {a:?} {b:?} {c:?}");
            }
        }
    }

    #[test]
    fn augmented_graph_of_two_cycle_example() {
        let g = two_cycle_example();
        let fam = InterventionFamily::new(4, vec![set(&[]), set(&[2]), set(&[3])]).unwrap();
        let aug = augment(&g, &fam).unwrap();
        assert_eq!(aug.num_context(), 2);
        assert!(aug.graph().has_directed(4, 2));
        assert!(aug.graph().has_directed(5, 3));
        assert_eq!(aug.graph().num_directed(), g.num_directed() + 2);
        let obs = InterventionFamily::new(4, vec![set(&[])]).unwrap();
        let plain = augment(&g, &obs).unwrap();
        assert_eq!(plain.num_context(), 0);
        assert_eq!(plain.graph(), &g);
    }

    #[test]
    fn context_vertices_have_no_parents_or_spouses() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let g = random_dmg(&mut rng, 6);
            let d = g.num_vertices();
            let targets: Vec<VertexSet> = (0..rng.random_range(1..4))
                .map(|_| (0..d).filter(|_| rng.random_bool(0.3)).collect())
                .collect();
            let fam = InterventionFamily::new(d, targets.clone()).unwrap();
            let aug = augment(&g, &fam).unwrap();
            let nonempty: Vec<&VertexSet> = targets.iter().filter(|t| !t.is_empty()).collect();
            assert_eq!(aug.num_context(), nonempty.len());
            for (k, c) in aug.context_vertices().enumerate() {
                assert_eq!(aug.graph().parents(c).count(), 0);
                assert_eq!(aug.graph().spouses(c).count(), 0);
                assert_eq!(&aug.graph().children(c).collect::<VertexSet>(), nonempty[k]);
            }
        }
    }
}
