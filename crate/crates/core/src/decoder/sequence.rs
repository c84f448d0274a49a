use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::graph::{Edge, Graph};

/// Sizes of the node- and edge-type vocabularies, excluding the EOS and
/// NO_EDGE tokens which take the next index in each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub num_node_types: usize,
    pub num_edge_types: usize,
}

impl Vocab {
    pub fn eos(self) -> usize {
        self.num_node_types
    }

    pub fn no_edge(self) -> usize {
        self.num_edge_types
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Expand neighbors in increasing original index.
    #[default]
    ByIndex,
}

/// Linearized graph: one node-type decision per node plus a final EOS, and
/// for every node after the first one edge decision against each earlier node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationSequence {
    pub vocab: Vocab,
    pub node_steps: Vec<usize>,
    /// `edge_steps[i]` holds the decisions for ordered node `i + 1`, one per
    /// earlier node `0..=i`.
    pub edge_steps: Vec<Vec<usize>>,
}

impl GenerationSequence {
    pub fn num_nodes(&self) -> usize {
        self.node_steps.len().saturating_sub(1)
    }

    pub fn num_edge_decisions(&self) -> usize {
        self.edge_steps.iter().map(Vec::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vocab;
        let n = self.num_nodes();
        ensure!(n >= 1, Contract, "sequence needs at least one node before EOS");
        ensure!(self.node_steps[n] == v.eos(), Contract, "sequence must end with EOS");
        ensure!(self.node_steps[..n].iter().all(|&t| t < v.num_node_types), Contract, "node types must lie in [0, {})", v.num_node_types);
        ensure!(self.edge_steps.len() == n - 1, Contract, "expected {} edge-step lists, got {}", n - 1, self.edge_steps.len());
        for (i, steps) in self.edge_steps.iter().enumerate() {
            ensure!(steps.len() == i + 1, Contract, "edge step list {i} has {} entries, expected {}", steps.len(), i + 1);
            ensure!(steps.iter().all(|&e| e <= v.no_edge()), Contract, "edge type out of range in list {i}");
        }
        Ok(())
    }

    /// Rebuilds the graph in sequence order.
    pub fn to_graph(&self, id: impl Into<String>, label: usize) -> Result<Graph> {
        self.validate()?;
        let types = self.node_steps[..self.num_nodes()].to_vec();
        let mut edges = Vec::new();
        for (i, steps) in self.edge_steps.iter().enumerate() {
            for (j, &e) in steps.iter().enumerate() {
                if e != self.vocab.no_edge() {
                    edges.push(Edge::new(j, i + 1, e));
                }
            }
        }
        Graph::from_types(id, types, edges, label, self.vocab.num_node_types)
    }
}

/// BFS linearization of a connected graph from `start`.
pub fn bfs_sequence(graph: &Graph, start: usize, tie_break: TieBreak, vocab: Vocab) -> Result<GenerationSequence> {
    let TieBreak::ByIndex = tie_break;
    let n = graph.num_nodes();
    ensure!(start < n, Argument, "start node {start} out of range for {n} nodes");
    let order = graph.bfs_order(start);
    if order.len() != n {
        return Err(Error::Contract(format!("graph {} is disconnected; pass a connected component", graph.id)));
    }
    ensure!(graph.node_types.iter().all(|&t| t < vocab.num_node_types), Argument, "graph {} has node types outside the vocabulary", graph.id);
    ensure!(graph.edges.iter().all(|e| e.kind < vocab.num_edge_types), Argument, "graph {} has edge types outside the vocabulary", graph.id);
    let mut node_steps: Vec<usize> = order.iter().map(|&v| graph.node_types[v]).collect();
    node_steps.push(vocab.eos());
    let edge_steps = (1..n)
        .map(|t| (0..t).map(|j| graph.edge_kind(order[t], order[j]).unwrap_or(vocab.no_edge())).collect())
        .collect();
    Ok(GenerationSequence { vocab, node_steps, edge_steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const VOCAB: Vocab = Vocab { num_node_types: 3, num_edge_types: 2 };

    fn graph(types: Vec<usize>, edges: &[(usize, usize, usize)]) -> Graph {
        let edges = edges.iter().map(|&(a, b, k)| Edge::new(a, b, k)).collect();
        Graph::from_types("t", types, edges, 0, 3).unwrap()
    }

    #[test]
    fn single_node() {
        let s = bfs_sequence(&graph(vec![2], &[]), 0, TieBreak::ByIndex, VOCAB).unwrap();
        assert_eq!(s.node_steps, vec![2, 3]);
        assert!(s.edge_steps.is_empty());
    }

    #[test]
    fn triangle_and_path() {
        let tri = graph(vec![0, 1, 2], &[(0, 1, 0), (0, 2, 1), (1, 2, 0)]);
        let s = bfs_sequence(&tri, 0, TieBreak::ByIndex, VOCAB).unwrap();
        assert_eq!(s.node_steps, vec![0, 1, 2, 3]);
        assert_eq!(s.edge_steps, vec![vec![0], vec![1, 0]]);

        let path = graph(vec![0, 0, 0], &[(0, 1, 0), (1, 2, 0)]);
        let s = bfs_sequence(&path, 0, TieBreak::ByIndex, VOCAB).unwrap();
        assert_eq!(s.edge_steps, vec![vec![0], vec![2, 0]]);
    }

    #[test]
    fn disconnected_rejected() {
        let g = graph(vec![0, 0, 0], &[(0, 1, 0)]);
        assert!(matches!(bfs_sequence(&g, 0, TieBreak::ByIndex, VOCAB), Err(Error::Contract(_))));
    }

    #[test]
    fn malformed_sequences() {
        let mut s = bfs_sequence(&graph(vec![0, 1], &[(0, 1, 1)]), 0, TieBreak::ByIndex, VOCAB).unwrap();
        s.validate().unwrap();
        s.edge_steps[0].push(0);
        assert!(s.validate().is_err());
        s.edge_steps[0].pop();
        s.node_steps[2] = 0;
        assert!(s.validate().is_err());
    }

    pub(crate) fn random_connected(rng: &mut impl Rng, max_nodes: usize) -> Graph {
        let n = rng.random_range(1..=max_nodes);
        let types: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let mut edges = Vec::new();
        for v in 1..n {
            edges.push(Edge::new(rng.random_range(0..v), v, rng.random_range(0..2)));
        }
        for a in 0..n {
            for b in a + 1..n {
                if rng.random_bool(0.15) && !edges.iter().any(|e| e.src == a && e.dst == b) {
                    edges.push(Edge::new(a, b, rng.random_range(0..2)));
                }
            }
        }
        Graph::from_types("r", types, edges, 0, 3).unwrap()
    }

    fn canonical(g: &Graph) -> Vec<(usize, usize, usize)> {
        let mut e: Vec<_> = g.edges.iter().map(|e| (e.src, e.dst, e.kind)).collect();
        e.sort_unstable();
        e
    }

    #[test]
    fn round_trip_is_idempotent_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let g = random_connected(&mut rng, 12);
            let start = rng.random_range(0..g.num_nodes());
            let s = bfs_sequence(&g, start, TieBreak::ByIndex, VOCAB).unwrap();
            let r = s.to_graph("r", 0).unwrap();
            assert_eq!(r.num_edges(), g.num_edges());
            let again = bfs_sequence(&r, 0, TieBreak::ByIndex, VOCAB).unwrap();
            assert_eq!(again, s);
            let r2 = again.to_graph("r", 0).unwrap();
            assert_eq!(canonical(&r2), canonical(&r));
            assert_eq!(r2.node_types, r.node_types);
        }
    }

    proptest! {
        #[test]
        fn reconstruction_is_isomorphic_via_bfs_order(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_connected(&mut rng, 9);
            let s = bfs_sequence(&g, 0, TieBreak::ByIndex, VOCAB).unwrap();
            let r = s.to_graph("r", 0).unwrap();
            // Position i of the sequence is original node order[i].
            let order = g.bfs_order(0);
            let mut pos = vec![0; order.len()];
            for (i, &v) in order.iter().enumerate() {
                pos[v] = i;
            }
            let mapped: Vec<_> = {
                let mut e: Vec<_> = g.edges.iter().map(|e| {
                    let (a, b) = (pos[e.src].min(pos[e.dst]), pos[e.src].max(pos[e.dst]));
                    (a, b, e.kind)
                }).collect();
                e.sort_unstable();
                e
            };
            prop_assert_eq!(mapped, canonical(&r));
            for (i, &v) in order.iter().enumerate() {
                prop_assert_eq!(r.node_types[i], g.node_types[v]);
            }
        }
    }
}
