use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Edge, Graph};
use crate::error::{ensure, Result};

/// The motif attached to the Barabási–Albert base; its position is the class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotifKind {
    House = 0,
    Cycle = 1,
}

impl MotifKind {
    fn edges(self) -> &'static [(usize, usize)] {
        match self {
            // Square 0-1-2-3 with the roof node 4 over the 0-1 side.
            MotifKind::House => &[(0, 1), (1, 2), (2, 3), (3, 0), (0, 4), (1, 4)],
            MotifKind::Cycle => &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)],
        }
    }
}

const MOTIF_NODES: usize = 5;

/// Preferential-attachment tree: each new node links to one existing node
/// chosen with probability proportional to its degree.
fn barabasi_albert_tree(n: usize, rng: &mut ChaCha8Rng) -> Vec<Edge> {
    let mut edges = vec![Edge::new(0, 1, 0)];
    // Each node appears once per incident edge end.
    let mut ends = vec![0usize, 1];
    for v in 2..n {
        let target = ends[rng.random_range(0..ends.len())];
        edges.push(Edge::new(v, target, 0));
        ends.push(v);
        ends.push(target);
    }
    edges
}

/// Base size range used when none is given.
pub const DEFAULT_BA_NODES_RANGE: (usize, usize) = (15, 20);

/// `count` graphs alternating house (label 0) and five-cycle (label 1)
/// motifs, each bridged by one edge to a BA base whose size is drawn
/// uniformly from the inclusive `ba_nodes_range`. All nodes share one type,
/// so only structure separates the classes.
pub fn generate_ba_motif_dataset(count: usize, ba_nodes_range: (usize, usize), seed: u64) -> Result<Dataset> {
    ensure!(count >= 2 && count % 2 == 0, Argument, "count must be even and >= 2, got {count}");
    let (lo, hi) = ba_nodes_range;
    ensure!(lo >= 5 && lo <= hi, Argument, "invalid BA node range ({lo}, {hi})");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graphs = Vec::with_capacity(count);
    for i in 0..count {
        let kind = if i % 2 == 0 { MotifKind::House } else { MotifKind::Cycle };
        let base = rng.random_range(lo..=hi);
        let mut edges = barabasi_albert_tree(base, &mut rng);
        edges.extend(kind.edges().iter().map(|&(a, b)| Edge::new(base + a, base + b, 0)));
        let motif_node = base + rng.random_range(0..MOTIF_NODES);
        let base_node = rng.random_range(0..base);
        edges.push(Edge::new(motif_node, base_node, 0));
        edges.sort_unstable();
        graphs.push(Graph::from_types(format!("g{i}"), vec![0; base + MOTIF_NODES], edges, kind as usize, 1)?);
    }
    Dataset::new("BA2Motifs", graphs, 2, 1, 1)
}
