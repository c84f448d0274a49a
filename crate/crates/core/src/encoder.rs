//! Graph encoder: GCN stack, mean pooling and diagonal-Gaussian heads.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::graph::Graph;
use crate::model::{GraphFnp, ModelConfig};
use crate::nn::{normalized_adjacency, GcnLayer, Mat, Mlp, MlpSpec, ParamGroup, ParamStore, Tape, Var};

pub const LOG_VARIANCE_MIN: f64 = -7.0;
pub const LOG_VARIANCE_MAX: f64 = 7.0;

/// Diagonal Gaussian `N(mean, exp(log_variance))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianEmbedding {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl GaussianEmbedding {
    pub fn standard(dim: usize) -> Self {
        GaussianEmbedding {
            mean: vec![0.0; dim],
            log_variance: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub(crate) fn from_tape(tape: &Tape, g: GaussianVar) -> Self {
        GaussianEmbedding {
            mean: tape.row_vec(g.mean),
            log_variance: tape.row_vec(g.log_variance),
        }
    }

    /// One row of a batched Gaussian.
    pub(crate) fn from_rows(tape: &Tape, g: GaussianVar, row: usize) -> Self {
        GaussianEmbedding {
            mean: tape.value(g.mean).row(row).to_vec(),
            log_variance: tape.value(g.log_variance).row(row).to_vec(),
        }
    }
}

/// Gaussian parameters living on a tape; rows are independent Gaussians.
#[derive(Clone, Copy, Debug)]
pub(crate) struct GaussianVar {
    pub mean: Var,
    pub log_variance: Var,
}

impl GaussianVar {
    /// Reparameterized draw `mean + exp(log_variance / 2) ⊙ noise`.
    pub fn sample(self, tape: &mut Tape, noise: Mat) -> Var {
        let half = tape.scale(self.log_variance, 0.5);
        let std = tape.exp(half);
        let eps = tape.constant(noise);
        let scaled = tape.mul(std, eps);
        tape.add(self.mean, scaled)
    }
}

/// Two Gaussian heads over a shared input, log-variance clamped.
pub(crate) fn gaussian_heads(tape: &mut Tape, store: &ParamStore, mean: &Mlp, log_variance: &Mlp, x: Var) -> GaussianVar {
    let mean = mean.forward(tape, store, x);
    let raw = log_variance.forward(tape, store, x);
    GaussianVar {
        mean,
        log_variance: tape.clamp(raw, LOG_VARIANCE_MIN, LOG_VARIANCE_MAX),
    }
}

/// Node states and their mean-pooled summary.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphRepresentation {
    pub node_states: Mat,
    pub pooled: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub gcn: Vec<GcnLayer>,
    pub mean_head: Mlp,
    pub log_variance_head: Mlp,
}

pub(crate) struct EncodedVars {
    pub node_states: Var,
    pub pooled: Var,
    pub embedding: GaussianVar,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let g = ParamGroup::ThetaE;
        let gcn = (0..cfg.gcn_layers)
            .map(|i| {
                let fan_in = if i == 0 { cfg.feature_dim } else { cfg.hidden_dim };
                GcnLayer::new(store, g, &format!("gcn{i}"), fan_in, cfg.hidden_dim, rng)
            })
            .collect();
        let head = MlpSpec::new(cfg.hidden_dim, cfg.hidden_dim, cfg.latent_dim, 2);
        Ok(Encoder {
            gcn,
            mean_head: Mlp::new(store, g, "z_mean", head, rng)?,
            log_variance_head: Mlp::new(store, g, "z_log_variance", head, rng)?,
        })
    }

    pub(crate) fn forward(&self, tape: &mut Tape, store: &ParamStore, graph: &Graph) -> Result<EncodedVars> {
        let expected = store.value(self.gcn[0].linear.weight).nrows();
        ensure!(graph.feature_dim() == expected, Shape, "graph {} has feature dim {}, encoder expects {expected}", graph.id, graph.feature_dim());
        let adj = Rc::new(normalized_adjacency(graph.num_nodes(), graph.edges.iter().map(|e| (e.src, e.dst)))?);
        let mut h = tape.constant(graph.features.clone());
        for layer in &self.gcn {
            h = layer.forward(tape, store, h, &adj);
        }
        let pooled = tape.mean_rows(h);
        let embedding = gaussian_heads(tape, store, &self.mean_head, &self.log_variance_head, pooled);
        Ok(EncodedVars {
            node_states: h,
            pooled,
            embedding,
        })
    }
}

/// Deterministic encoding of one graph.
pub fn encode(model: &GraphFnp, graph: &Graph) -> Result<(GraphRepresentation, GaussianEmbedding)> {
    let mut tape = Tape::default();
    let enc = model.encoder.forward(&mut tape, &model.params, graph)?;
    let rep = GraphRepresentation {
        node_states: tape.value(enc.node_states).clone(),
        pooled: tape.row_vec(enc.pooled),
    };
    Ok((rep, GaussianEmbedding::from_tape(&tape, enc.embedding)))
}

/// Reparameterized draw from `embedding`.
pub fn sample(embedding: &GaussianEmbedding, noise: &[f64]) -> Result<Vec<f64>> {
    ensure!(noise.len() == embedding.dim(), Shape, "noise length {} for dim {}", noise.len(), embedding.dim());
    Ok(embedding
        .mean
        .iter()
        .zip(&embedding.log_variance)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}
