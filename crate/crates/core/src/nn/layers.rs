use std::rc::Rc;

use ndarray::Axis;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamGroup, ParamId, ParamStore};
use super::tape::{Mat, SparseMatrix, Tape, Var};
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

/// Shape of a fully connected stack. `depth` counts linear layers, so a
/// depth-2 stack has one hidden layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub depth: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(in_dim: usize, hidden_dim: usize, out_dim: usize, depth: usize) -> Self {
        MlpSpec {
            in_dim,
            hidden_dim,
            out_dim,
            depth,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.in_dim >= 1 && self.hidden_dim >= 1 && self.out_dim >= 1 && self.depth >= 1,
            Argument,
            "invalid MLP spec {self:?}"
        );
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, group: ParamGroup, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: store.glorot(group, &format!("{name}.weight"), fan_in, fan_out, rng),
            bias: store.zeros(group, &format!("{name}.bias"), 1, fan_out),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, group: ParamGroup, name: &str, spec: MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let layers = (0..spec.depth)
            .map(|i| {
                let fan_in = if i == 0 { spec.in_dim } else { spec.hidden_dim };
                let fan_out = if i + 1 == spec.depth { spec.out_dim } else { spec.hidden_dim };
                Linear::new(store, group, &format!("{name}.{i}"), fan_in, fan_out, rng)
            })
            .collect();
        Ok(Mlp { spec, layers })
    }

    /// Applies the stack to every row of `x`; no activation after the last layer.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h);
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        h
    }

    /// Zeroes every weight and bias of this stack.
    pub fn zero(&self, store: &mut ParamStore) {
        for l in &self.layers {
            store.value_mut(l.weight).fill(0.0);
            store.value_mut(l.bias).fill(0.0);
        }
    }

    /// Zeroes only the final layer.
    pub fn zero_output(&self, store: &mut ParamStore) {
        let last = self.layers.last().expect("depth >= 1");
        store.value_mut(last.weight).fill(0.0);
        store.value_mut(last.bias).fill(0.0);
    }
}

/// Evaluates an MLP on one input vector.
pub fn mlp_forward(mlp: &Mlp, store: &ParamStore, input: &[f64]) -> Result<Vec<f64>> {
    ensure!(input.len() == mlp.spec.in_dim, Shape, "MLP expects {} inputs, got {}", mlp.spec.in_dim, input.len());
    let mut tape = Tape::default();
    let x = tape.row(input);
    let y = mlp.forward(&mut tape, store, x);
    Ok(tape.row_vec(y))
}

/// `D̂^{-1/2} (A + I) D̂^{-1/2}` for an undirected edge list over `n` nodes.
pub fn normalized_adjacency(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<SparseMatrix> {
    let edges: Vec<(usize, usize)> = edges.into_iter().collect();
    let mut degree = vec![1.0f64; n];
    for &(a, b) in &edges {
        ensure!(a < n && b < n, Shape, "edge ({a}, {b}) out of range for {n} nodes");
        if a != b {
            degree[a] += 1.0;
            degree[b] += 1.0;
        }
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| d.sqrt().recip()).collect();
    let mut entries: Vec<(usize, usize, f64)> = (0..n).map(|v| (v, v, inv_sqrt[v] * inv_sqrt[v])).collect();
    for &(a, b) in &edges {
        if a != b {
            let w = inv_sqrt[a] * inv_sqrt[b];
            entries.push((a, b, w));
            entries.push((b, a, w));
        }
    }
    Ok(SparseMatrix { rows: n, entries })
}

/// One symmetric-normalized graph convolution followed by ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GcnLayer {
    pub linear: Linear,
}

impl GcnLayer {
    pub fn new(store: &mut ParamStore, group: ParamGroup, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        GcnLayer {
            linear: Linear::new(store, group, name, in_dim, out_dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var, adj: &Rc<SparseMatrix>) -> Var {
        let w = tape.param(store, self.linear.weight);
        let b = tape.param(store, self.linear.bias);
        // Â(hW) == (Âh)W; multiply first when it shrinks the width.
        let (rows, in_dim) = tape.value(h).dim();
        let out_dim = store.value(self.linear.weight).ncols();
        let z = if out_dim < in_dim || rows == 0 {
            let hw = tape.matmul(h, w);
            tape.propagate(hw, adj.clone())
        } else {
            let ah = tape.propagate(h, adj.clone());
            tape.matmul(ah, w)
        };
        let z = tape.add_row(z, b);
        tape.relu(z)
    }
}

/// Runs one GCN layer on plain matrices.
pub fn gcn_layer(layer: &GcnLayer, store: &ParamStore, node_states: &Mat, edges: &[(usize, usize)]) -> Result<Mat> {
    let n = node_states.nrows();
    let in_dim = store.value(layer.linear.weight).nrows();
    ensure!(node_states.ncols() == in_dim, Shape, "GCN expects width {in_dim}, got {}", node_states.ncols());
    let adj = Rc::new(normalized_adjacency(n, edges.iter().copied())?);
    let mut tape = Tape::default();
    let h = tape.constant(node_states.clone());
    let out = layer.forward(&mut tape, store, h, &adj);
    Ok(tape.value(out).clone())
}

/// Element-wise mean over node rows.
pub fn aggregate_mean(node_states: &Mat) -> Result<Vec<f64>> {
    ensure!(node_states.nrows() >= 1, Argument, "mean of zero rows");
    Ok(node_states.mean_axis(Axis(0)).expect("non-empty").to_vec())
}
