//! Latent-conditioned autoregressive graph generator.
//!
//! Nodes are emitted in BFS order. Each step appends a placeholder node that
//! carries a learned init embedding, runs the decoder GNN over the partial
//! graph and predicts the node type (or EOS). Once typed, the new node is
//! scored against every earlier node for an edge type (or NO_EDGE), and the
//! GNN is re-run after every inserted edge.

mod sequence;

pub use sequence::{bfs_sequence, GenerationSequence, TieBreak, Vocab};

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::graph::{Edge, Graph};
use crate::model::{GraphFnp, ModelConfig};
use crate::nn::{normalized_adjacency, GcnLayer, Gradients, Mat, Mlp, MlpSpec, ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::rationale::rationale_embeddings;
use crate::rng::derive_seed;

pub const DEFAULT_MAX_NODES: usize = 50;

#[derive(Clone, Debug)]
pub struct Decoder {
    pub vocab: Vocab,
    pub latent_dim: usize,
    pub init_embedding: ParamId,
    pub type_embedding: ParamId,
    pub gcn: Vec<GcnLayer>,
    pub node_head: Mlp,
    pub edge_head: Mlp,
}

/// Graph generated so far plus the conditioning latent.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialGraphState {
    pub z: Vec<f64>,
    pub node_types: Vec<usize>,
    pub edges: Vec<Edge>,
}

impl PartialGraphState {
    pub fn new(z: Vec<f64>) -> Self {
        PartialGraphState {
            z,
            node_types: Vec::new(),
            edges: Vec::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.node_types.len()
    }

    pub fn push_node(&mut self, node_type: usize) {
        self.node_types.push(node_type);
    }

    /// Connects the newest node to the earlier node `j`.
    pub fn add_edge(&mut self, j: usize, kind: usize) -> Result<()> {
        let n = self.num_nodes();
        ensure!(n >= 2 && j < n - 1, Argument, "edge target {j} must precede the newest node (have {n} nodes)");
        ensure!(!self.edges.iter().any(|e| e.src == j && e.dst == n - 1), Argument, "edge ({j}, {}) already present", n - 1);
        self.edges.push(Edge::new(j, n - 1, kind));
        Ok(())
    }

    pub fn to_graph(&self, id: impl Into<String>, label: usize, num_node_types: usize) -> Result<Graph> {
        Graph::from_types(id, self.node_types.clone(), self.edges.clone(), label, num_node_types)
    }

    fn pairs(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|e| (e.src, e.dst)).collect()
    }
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let g = ParamGroup::ThetaD;
        let dh = cfg.decoder_hidden_dim;
        let l = cfg.latent_dim;
        let vocab = Vocab {
            num_node_types: cfg.num_node_types,
            num_edge_types: cfg.num_edge_types,
        };
        Ok(Decoder {
            vocab,
            latent_dim: l,
            init_embedding: store.glorot(g, "init_embedding", 1, dh, rng),
            type_embedding: store.glorot(g, "type_embedding", vocab.num_node_types, dh, rng),
            gcn: (0..cfg.decoder_layers).map(|i| GcnLayer::new(store, g, &format!("gcn{i}"), dh, dh, rng)).collect(),
            node_head: Mlp::new(store, g, "node_head", MlpSpec::new(2 * dh + l, dh, vocab.num_node_types + 1, 2), rng)?,
            edge_head: Mlp::new(store, g, "edge_head", MlpSpec::new(3 * dh + l, dh, vocab.num_edge_types + 1, 2), rng)?,
        })
    }

    /// Decoder GNN over typed nodes, optionally with a trailing placeholder.
    /// Returns per-node states and their mean.
    fn gnn(&self, tape: &mut Tape, store: &ParamStore, types: &[usize], edges: &[(usize, usize)], placeholder: bool) -> Result<(Var, Var)> {
        let n = types.len() + usize::from(placeholder);
        ensure!(n >= 1, Argument, "decoder GNN needs at least one node");
        let mut parts = Vec::with_capacity(2);
        if !types.is_empty() {
            let table = tape.param(store, self.type_embedding);
            parts.push(tape.gather_rows(table, types.to_vec()));
        }
        if placeholder {
            parts.push(tape.param(store, self.init_embedding));
        }
        let mut h = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) };
        let adj = Rc::new(normalized_adjacency(n, edges.iter().copied())?);
        for layer in &self.gcn {
            h = layer.forward(tape, store, h, &adj);
        }
        let pooled = tape.mean_rows(h);
        Ok((h, pooled))
    }

    fn node_log_probs(&self, tape: &mut Tape, store: &ParamStore, h: Var, pooled: Var, z: Var) -> Var {
        let last = tape.value(h).nrows() - 1;
        let hv = tape.pick_row(h, last);
        let x = tape.concat_cols(&[hv, pooled, z]);
        let logits = self.node_head.forward(tape, store, x);
        tape.log_softmax(logits)
    }

    /// Edge log-probabilities of the newest node `t` against each of `js`, one row per `j`.
    fn edge_log_probs(&self, tape: &mut Tape, store: &ParamStore, h: Var, t: usize, js: &[usize], pooled: Var, z: Var) -> Var {
        let k = js.len();
        let hv = tape.pick_row(h, t);
        let hv = tape.repeat_row(hv, k);
        let hj = tape.gather_rows(h, js.to_vec());
        let hg = tape.repeat_row(pooled, k);
        let zz = tape.repeat_row(z, k);
        let x = tape.concat_cols(&[hv, hj, hg, zz]);
        let logits = self.edge_head.forward(tape, store, x);
        tape.log_softmax(logits)
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        ensure!(z.len() == self.latent_dim, Shape, "latent has length {}, decoder expects {}", z.len(), self.latent_dim);
        Ok(())
    }

    /// Distribution over node types plus EOS for the next node.
    pub fn step_node_probability(&self, store: &ParamStore, state: &PartialGraphState) -> Result<Vec<f64>> {
        self.check_latent(&state.z)?;
        let mut tape = Tape::default();
        let z = tape.row(&state.z);
        let (h, pooled) = self.gnn(&mut tape, store, &state.node_types, &state.pairs(), true)?;
        let lp = self.node_log_probs(&mut tape, store, h, pooled, z);
        Ok(tape.value(lp).iter().map(|x| x.exp()).collect())
    }

    /// Distribution over edge types plus NO_EDGE between the newest node and `j`.
    pub fn step_edge_probability(&self, store: &ParamStore, state: &PartialGraphState, j: usize) -> Result<Vec<f64>> {
        self.check_latent(&state.z)?;
        let n = state.num_nodes();
        ensure!(n >= 2 && j < n - 1, Argument, "edge query {j} out of range for {n} nodes");
        let mut tape = Tape::default();
        let z = tape.row(&state.z);
        let (h, pooled) = self.gnn(&mut tape, store, &state.node_types, &state.pairs(), false)?;
        let lp = self.edge_log_probs(&mut tape, store, h, n - 1, &[j], pooled, z);
        Ok(tape.value(lp).iter().map(|x| x.exp()).collect())
    }

    /// Per-node decoder states and pooled state of the typed partial graph.
    pub fn node_states(&self, store: &ParamStore, state: &PartialGraphState) -> Result<(Mat, Vec<f64>)> {
        let mut tape = Tape::default();
        let (h, pooled) = self.gnn(&mut tape, store, &state.node_types, &state.pairs(), false)?;
        Ok((tape.value(h).clone(), tape.row_vec(pooled)))
    }

    /// Teacher-forced log-likelihood of `seq` given the 1×l latent `z`.
    pub(crate) fn log_likelihood(&self, tape: &mut Tape, store: &ParamStore, seq: &GenerationSequence, z: Var) -> Result<Var> {
        seq.validate()?;
        ensure!(seq.vocab == self.vocab, Contract, "sequence vocabulary {:?} does not match decoder {:?}", seq.vocab, self.vocab);
        let n = seq.num_nodes();
        let no_edge = self.vocab.no_edge();
        let mut types = Vec::with_capacity(n);
        let mut edges = Vec::new();
        let mut terms = Vec::new();
        for t in 0..=n {
            let (h, pooled) = self.gnn(tape, store, &types, &edges, true)?;
            let lp = self.node_log_probs(tape, store, h, pooled, z);
            terms.push(tape.pick_sum(lp, vec![seq.node_steps[t]]));
            if t == n {
                break;
            }
            types.push(seq.node_steps[t]);
            if t == 0 {
                continue;
            }
            let targets = &seq.edge_steps[t - 1];
            let (mut h, mut pooled) = self.gnn(tape, store, &types, &edges, false)?;
            let mut start = 0;
            for j in 0..t {
                let inserted = targets[j] != no_edge;
                if !inserted && j + 1 < t {
                    continue;
                }
                // Decisions start..=j share one GNN state.
                let js: Vec<usize> = (start..=j).collect();
                let lp = self.edge_log_probs(tape, store, h, t, &js, pooled, z);
                terms.push(tape.pick_sum(lp, targets[start..=j].to_vec()));
                start = j + 1;
                if inserted {
                    edges.push((j, t));
                    if j + 1 < t {
                        (h, pooled) = self.gnn(tape, store, &types, &edges, false)?;
                    }
                }
            }
        }
        let total = terms.into_iter().reduce(|a, b| tape.add(a, b)).expect("at least one term");
        Ok(total)
    }

    pub fn sequence_log_likelihood(&self, store: &ParamStore, seq: &GenerationSequence, z: &[f64]) -> Result<f64> {
        self.check_latent(z)?;
        let mut tape = Tape::default();
        let z = tape.row(z);
        let ll = self.log_likelihood(&mut tape, store, seq, z)?;
        Ok(tape.scalar(ll))
    }

    /// Log-likelihood with its gradient over the decoder parameters.
    pub fn sequence_log_likelihood_grad(&self, store: &ParamStore, seq: &GenerationSequence, z: &[f64]) -> Result<(f64, Gradients)> {
        self.check_latent(z)?;
        let mut tape = Tape::new(&[ParamGroup::ThetaD]);
        let z = tape.row(z);
        let ll = self.log_likelihood(&mut tape, store, seq, z)?;
        Ok((tape.scalar(ll), tape.backward(ll, store)))
    }

    /// Free-running generation; EOS is disallowed for the first node and
    /// generation stops after `max_nodes` nodes.
    pub fn sample_graph(&self, store: &ParamStore, z: &[f64], max_nodes: usize, seed: u64) -> Result<Graph> {
        self.sample_state(store, z, max_nodes, seed)?
            .to_graph(format!("sample_{seed}"), 0, self.vocab.num_node_types)
    }

    fn sample_state(&self, store: &ParamStore, z: &[f64], max_nodes: usize, seed: u64) -> Result<PartialGraphState> {
        ensure!(max_nodes >= 1, Argument, "max_nodes must be >= 1");
        self.check_latent(z)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = PartialGraphState::new(z.to_vec());
        let eos = self.vocab.eos();
        let no_edge = self.vocab.no_edge();
        while state.num_nodes() < max_nodes {
            let t = state.num_nodes();
            let mut tape = Tape::default();
            let zv = tape.row(z);
            let (h, pooled) = self.gnn(&mut tape, store, &state.node_types, &state.pairs(), true)?;
            let lp = self.node_log_probs(&mut tape, store, h, pooled, zv);
            let mut probs: Vec<f64> = tape.value(lp).iter().map(|x| x.exp()).collect();
            if t == 0 {
                probs[eos] = 0.0;
            }
            let node_type = categorical(&mut rng, &probs);
            if node_type == eos {
                break;
            }
            state.push_node(node_type);
            if t == 0 {
                continue;
            }
            let (mut h, mut pooled) = self.gnn(&mut tape, store, &state.node_types, &state.pairs(), false)?;
            for j in 0..t {
                let lp = self.edge_log_probs(&mut tape, store, h, t, &[j], pooled, zv);
                let probs: Vec<f64> = tape.value(lp).iter().map(|x| x.exp()).collect();
                let kind = categorical(&mut rng, &probs);
                if kind != no_edge {
                    state.add_edge(j, kind)?;
                    (h, pooled) = self.gnn(&mut tape, store, &state.node_types, &state.pairs(), false)?;
                }
            }
        }
        Ok(state)
    }
}

/// Index drawn proportionally to `weights` (need not be normalized).
fn categorical(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Decodes graphs from rationale `index`: its mean when `num_samples == 1`,
/// otherwise independent draws from its Gaussian embedding.
pub fn decode_rationale(model: &GraphFnp, index: usize, num_samples: usize, seed: u64, max_nodes: usize) -> Result<Vec<Graph>> {
    model.require_rationales()?;
    let r = model.num_rationales();
    ensure!(index < r, Argument, "rationale index {index} out of range (have {r})");
    ensure!(num_samples >= 1, Argument, "num_samples must be >= 1");
    let embedding = rationale_embeddings(model).swap_remove(index);
    let class = model.rationales.class_of[index];
    (0..num_samples as u64)
        .into_par_iter()
        .map(|k| {
            let draw_seed = derive_seed(seed, &[index as u64, k]);
            let z = if num_samples == 1 {
                embedding.mean.clone()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
                let noise: Vec<f64> = (0..embedding.dim()).map(|_| rng.sample(StandardNormal)).collect();
                crate::encoder::sample(&embedding, &noise)?
            };
            let state = model.decoder.sample_state(&model.params, &z, max_nodes, draw_seed ^ 0xdec0de)?;
            state.to_graph(format!("rationale{index}_{k}"), class, model.config.num_node_types)
        })
        .collect()
}
