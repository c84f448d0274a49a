//! Graphs, labelled datasets, and the ways they are produced and consumed:
//! synthetic BA-motif generation, TU-format files, splitting and batching.

mod motif;
mod split;
mod tu;

pub use motif::{generate_ba_motif_dataset, MotifKind, DEFAULT_BA_NODES_RANGE};
pub use split::{minibatch, split, Minibatches, SplitSpec};
pub use tu::{discover_tu_name, parse_tu_dataset, write_tu_dataset};

use std::collections::{BTreeSet, VecDeque};

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};

/// An undirected typed edge, stored once with `src < dst`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub kind: usize,
}

impl Edge {
    pub fn new(a: usize, b: usize, kind: usize) -> Self {
        let (src, dst) = if a < b { (a, b) } else { (b, a) };
        Edge { src, dst, kind }
    }
}

/// A labelled graph. Node features are kept alongside the discrete node
/// types the decoder generates; for every source in this crate the features
/// are the one-hot encoding of the types.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub id: String,
    pub features: Array2<f64>,
    pub node_types: Vec<usize>,
    pub edges: Vec<Edge>,
    pub label: usize,
}

impl Graph {
    /// Builds a graph whose features are the one-hot encoding of `node_types`.
    pub fn from_types(
        id: impl Into<String>,
        node_types: Vec<usize>,
        edges: Vec<Edge>,
        label: usize,
        num_node_types: usize,
    ) -> Result<Self> {
        let n = node_types.len();
        let mut features = Array2::zeros((n, num_node_types.max(1)));
        for (v, &t) in node_types.iter().enumerate() {
            ensure!(t < num_node_types.max(1), Argument, "node type {t} out of range");
            features[[v, t]] = 1.0;
        }
        let graph = Graph {
            id: id.into(),
            features,
            node_types,
            edges,
            label,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn num_nodes(&self) -> usize {
        self.node_types.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        ensure!(n >= 1, Argument, "graph {} has no nodes", self.id);
        ensure!(
            self.features.nrows() == n,
            Shape,
            "graph {}: {} feature rows for {} nodes",
            self.id,
            self.features.nrows(),
            n
        );
        let mut seen = BTreeSet::new();
        for e in &self.edges {
            ensure!(e.dst < n, Shape, "graph {}: edge ({}, {}) out of range", self.id, e.src, e.dst);
            ensure!(e.src < e.dst, Argument, "graph {}: edge ({}, {}) not stored with src < dst", self.id, e.src, e.dst);
            ensure!(seen.insert((e.src, e.dst)), Argument, "graph {}: duplicate edge ({}, {})", self.id, e.src, e.dst);
        }
        Ok(())
    }

    /// Symmetric adjacency lists, neighbours sorted by index.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes()];
        for e in &self.edges {
            adj[e.src].push(e.dst);
            adj[e.dst].push(e.src);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn edge_kind(&self, a: usize, b: usize) -> Option<usize> {
        let key = Edge::new(a, b, 0);
        self.edges
            .iter()
            .find(|e| e.src == key.src && e.dst == key.dst)
            .map(|e| e.kind)
    }

    /// Nodes reachable from `start`, in BFS order with index-sorted expansion.
    pub fn bfs_order(&self, start: usize) -> Vec<usize> {
        let adj = self.neighbors();
        let mut seen = vec![false; self.num_nodes()];
        let mut order = Vec::with_capacity(self.num_nodes());
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &u in &adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
        order
    }

    pub fn is_connected(&self) -> bool {
        self.bfs_order(0).len() == self.num_nodes()
    }

    /// The connected component containing `start`, re-indexed in ascending
    /// order of the original node indices.
    pub fn component(&self, start: usize) -> Graph {
        let mut nodes = self.bfs_order(start);
        nodes.sort_unstable();
        if nodes.len() == self.num_nodes() {
            return self.clone();
        }
        let mut remap = vec![usize::MAX; self.num_nodes()];
        for (new, &old) in nodes.iter().enumerate() {
            remap[old] = new;
        }
        let edges = self
            .edges
            .iter()
            .filter(|e| remap[e.src] != usize::MAX)
            .map(|e| Edge::new(remap[e.src], remap[e.dst], e.kind))
            .collect();
        Graph {
            id: self.id.clone(),
            features: self.features.select(ndarray::Axis(0), &nodes),
            node_types: nodes.iter().map(|&v| self.node_types[v]).collect(),
            edges,
            label: self.label,
        }
    }

    /// Relabels nodes so that old node `v` becomes `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Graph {
        let n = self.num_nodes();
        let mut features = Array2::zeros(self.features.raw_dim());
        let mut node_types = vec![0; n];
        for v in 0..n {
            features.row_mut(perm[v]).assign(&self.features.row(v));
            node_types[perm[v]] = self.node_types[v];
        }
        let mut edges: Vec<Edge> = self
            .edges
            .iter()
            .map(|e| Edge::new(perm[e.src], perm[e.dst], e.kind))
            .collect();
        edges.sort_unstable();
        Graph {
            id: self.id.clone(),
            features,
            node_types,
            edges,
            label: self.label,
        }
    }

    /// True when the graph contains a simple cycle of exactly `len` nodes.
    pub fn has_cycle_of_length(&self, len: usize) -> bool {
        if len < 3 || self.num_nodes() < len {
            return false;
        }
        let adj = self.neighbors();
        // Anchor each cycle at its smallest node so every cycle is found from one start.
        fn extend(adj: &[Vec<usize>], start: usize, path: &mut Vec<usize>, on_path: &mut [bool], len: usize) -> bool {
            let last = *path.last().unwrap();
            for &next in &adj[last] {
                if path.len() == len {
                    if next == start {
                        return true;
                    }
                    continue;
                }
                if next <= start || on_path[next] {
                    continue;
                }
                path.push(next);
                on_path[next] = true;
                let found = extend(adj, start, path, on_path, len);
                on_path[next] = false;
                path.pop();
                if found {
                    return true;
                }
            }
            false
        }
        let mut on_path = vec![false; self.num_nodes()];
        (0..self.num_nodes()).any(|start| {
            let mut path = vec![start];
            on_path[start] = true;
            let found = extend(&adj, start, &mut path, &mut on_path, len);
            on_path[start] = false;
            found
        })
    }
}

/// A collection of graphs sharing feature width and label space.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub graphs: Vec<Graph>,
    pub num_classes: usize,
    pub num_node_types: usize,
    pub num_edge_types: usize,
    pub feature_dim: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        graphs: Vec<Graph>,
        num_classes: usize,
        num_node_types: usize,
        num_edge_types: usize,
    ) -> Result<Self> {
        let feature_dim = graphs.first().map(Graph::feature_dim).unwrap_or(num_node_types);
        let ds = Dataset {
            name: name.into(),
            graphs,
            num_classes,
            num_node_types,
            num_edge_types,
            feature_dim,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_classes >= 2, Argument, "dataset needs at least 2 classes, got {}", self.num_classes);
        ensure!(self.num_node_types >= 1 && self.num_edge_types >= 1, Argument, "empty type vocabulary");
        for g in &self.graphs {
            g.validate()?;
            ensure!(g.feature_dim() == self.feature_dim, Shape, "graph {} has feature dim {}, dataset {}", g.id, g.feature_dim(), self.feature_dim);
            ensure!(g.label < self.num_classes, Argument, "graph {} label {} outside [0, {})", g.id, g.label, self.num_classes);
            if let Some(t) = g.node_types.iter().find(|&&t| t >= self.num_node_types) {
                return Err(Error::Argument(format!("graph {} node type {t} out of range", g.id)));
            }
            if let Some(e) = g.edges.iter().find(|e| e.kind >= self.num_edge_types) {
                return Err(Error::Argument(format!("graph {} edge type {} out of range", g.id, e.kind)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// Same metadata, different graphs.
    pub fn with_graphs(&self, graphs: Vec<Graph>) -> Dataset {
        Dataset {
            name: self.name.clone(),
            graphs,
            num_classes: self.num_classes,
            num_node_types: self.num_node_types,
            num_edge_types: self.num_edge_types,
            feature_dim: self.feature_dim,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for g in &self.graphs {
            counts[g.label] += 1;
        }
        counts
    }

    pub fn find(&self, id: &str) -> Option<&Graph> {
        self.graphs.iter().find(|g| g.id == id)
    }

    /// SHA-256 over the TU serialization; equal datasets hash equally.
    pub fn fingerprint(&self) -> String {
        let files = tu::render_tu(self);
        let mut hasher = Sha256::new();
        hasher.update(self.name.as_bytes());
        for (suffix, body) in files {
            hasher.update(suffix.as_bytes());
            hasher.update(body.as_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn path3() -> Graph {
        Graph::from_types("p", vec![0, 0, 0], vec![Edge::new(0, 1, 0), Edge::new(1, 2, 0)], 0, 1).unwrap()
    }

    #[test]
    fn rejects_unnormalized_edges() {
        let g = Graph {
            id: "bad".into(),
            features: Array2::ones((2, 1)),
            node_types: vec![0, 0],
            edges: vec![Edge { src: 1, dst: 0, kind: 0 }],
            label: 0,
        };
        assert!(g.validate().is_err());
        let loop_edge = Graph {
            edges: vec![Edge { src: 1, dst: 1, kind: 0 }],
            ..g.clone()
        };
        assert!(loop_edge.validate().is_err());
    }

    #[test]
    fn bfs_and_components() {
        let g = path3();
        assert_eq!(g.bfs_order(1), vec![1, 0, 2]);
        assert!(g.is_connected());
        let split = Graph::from_types("s", vec![0, 0, 0], vec![Edge::new(0, 2, 0)], 0, 1).unwrap();
        assert!(!split.is_connected());
        let comp = split.component(2);
        assert_eq!(comp.num_nodes(), 2);
        assert_eq!(comp.edges, vec![Edge::new(0, 1, 0)]);
    }

    #[test]
    fn cycle_detection() {
        let ring: Vec<Edge> = (0..5).map(|i| Edge::new(i, (i + 1) % 5, 0)).collect();
        let g = Graph::from_types("c5", vec![0; 5], ring, 0, 1).unwrap();
        assert!(g.has_cycle_of_length(5));
        assert!(!g.has_cycle_of_length(4));
        assert!(!g.has_cycle_of_length(3));
        assert!(!path3().has_cycle_of_length(3));
    }
}
