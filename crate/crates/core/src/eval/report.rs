use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{auroc, ece, rationale_f1, CalibrationReport, RF1Report};
use crate::decoder::{decode_rationale, DEFAULT_MAX_NODES};
use crate::error::{ensure, Error, Result};
use crate::fnp::{predict_distribution, PredictiveOutput};
use crate::graph::{Dataset, Graph};
use crate::model::GraphFnp;
use crate::rng::derive_seed;
use crate::trainer::TrainConfig;

/// Predictive outputs for every graph; graph `i` draws from `derive_seed(seed, [i])`.
pub fn predict_all(model: &GraphFnp, ds: &Dataset, num_samples: usize, seed: u64) -> Result<Vec<PredictiveOutput>> {
    ds.graphs
        .par_iter()
        .enumerate()
        .map(|(i, g)| predict_distribution(model, g, num_samples, derive_seed(seed, &[i as u64])))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub id: String,
    pub label: usize,
    pub predicted_label: usize,
    pub confidence: f64,
    pub mean_probs: Vec<f64>,
    pub mean_correlation: Option<Vec<f64>>,
    pub rationale_index: Option<usize>,
    pub rationale_class: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub num_graphs: usize,
    pub num_samples: usize,
    pub seed: u64,
    pub accuracy: f64,
    /// Binary tasks with both classes present only.
    pub auroc: Option<f64>,
    pub ece: f64,
    pub ece_percent: f64,
    pub nll: f64,
    pub calibration: CalibrationReport,
    pub rf1_at_1: Option<RF1Report>,
    pub rf1_at_3: Option<RF1Report>,
    /// Why rationale-F1 is missing, when it is.
    pub rf1_skipped: Option<String>,
    pub graphs: Vec<GraphRecord>,
}

fn records(model: &GraphFnp, ds: &Dataset, outputs: &[PredictiveOutput]) -> Vec<GraphRecord> {
    ds.graphs
        .iter()
        .zip(outputs)
        .map(|(g, out)| {
            let top = out.top_rationale();
            GraphRecord {
                id: g.id.clone(),
                label: g.label,
                predicted_label: out.predicted_label,
                confidence: out.confidence,
                mean_probs: out.mean_probs.clone(),
                mean_correlation: out.mean_correlation.clone(),
                rationale_index: top,
                rationale_class: top.map(|j| model.rationales.class_of[j]),
            }
        })
        .collect()
}

/// Full metric record on `test` with `cfg.mc_samples_eval` draws per graph.
pub fn evaluate(model: &GraphFnp, test: &Dataset, cfg: &TrainConfig) -> Result<Metrics> {
    ensure!(!test.is_empty(), Argument, "evaluate on an empty dataset");
    let outputs = predict_all(model, test, cfg.mc_samples_eval, cfg.seed)?;
    let n = test.len() as f64;
    let correct: Vec<bool> = test.graphs.iter().zip(&outputs).map(|(g, o)| o.predicted_label == g.label).collect();
    let confidences: Vec<f64> = outputs.iter().map(|o| o.confidence).collect();
    let calibration = ece(&confidences, &correct, cfg.ece_bins)?;
    let nll = test
        .graphs
        .iter()
        .zip(&outputs)
        .map(|(g, o)| -o.mean_probs[g.label].max(1e-300).ln())
        .sum::<f64>()
        / n;
    let auroc = if test.num_classes == 2 {
        let scores: Vec<f64> = outputs.iter().map(|o| o.mean_probs[1]).collect();
        let labels: Vec<bool> = test.graphs.iter().map(|g| g.label == 1).collect();
        auroc(&scores, &labels).ok()
    } else {
        None
    };
    let (rf1_at_1, rf1_at_3, rf1_skipped) = match rationale_f1(model, test, 1) {
        Ok(at1) => {
            let at3 = if model.num_rationales() >= 3 { Some(rationale_f1(model, test, 3)?) } else { None };
            (Some(at1), at3, None)
        }
        Err(Error::Unsupported(why)) => (None, None, Some(why)),
        Err(e) => return Err(e),
    };
    Ok(Metrics {
        num_graphs: test.len(),
        num_samples: cfg.mc_samples_eval,
        seed: cfg.seed,
        accuracy: correct.iter().filter(|&&c| c).count() as f64 / n,
        auroc,
        ece: calibration.ece,
        ece_percent: 100.0 * calibration.ece,
        nll,
        calibration,
        rf1_at_1,
        rf1_at_3,
        rf1_skipped,
        graphs: records(model, test, &outputs),
    })
}

/// A generated graph in plain serializable form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedGraph {
    pub id: String,
    pub label: usize,
    pub node_types: Vec<usize>,
    /// `[src, dst, edge_type]` with `src < dst`.
    pub edges: Vec<[usize; 3]>,
}

impl From<&Graph> for DecodedGraph {
    fn from(g: &Graph) -> Self {
        DecodedGraph {
            id: g.id.clone(),
            label: g.label,
            node_types: g.node_types.clone(),
            edges: g.edges.iter().map(|e| [e.src, e.dst, e.kind]).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExplainOptions {
    pub num_samples: usize,
    pub max_nodes: usize,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        ExplainOptions {
            num_samples: 16,
            max_nodes: DEFAULT_MAX_NODES,
        }
    }
}

impl From<&TrainConfig> for ExplainOptions {
    fn from(cfg: &TrainConfig) -> Self {
        ExplainOptions {
            num_samples: cfg.mc_samples_eval,
            max_nodes: cfg.max_nodes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub graph_id: String,
    pub label: usize,
    pub prediction: usize,
    pub confidence: f64,
    pub mean_probs: Vec<f64>,
    pub mean_correlation: Vec<f64>,
    pub mean_kernel: Vec<f64>,
    pub rationale_index: usize,
    pub rationale_class: usize,
    pub decoded: Vec<DecodedGraph>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RationaleExplanation {
    pub rationale_index: usize,
    pub rationale_class: usize,
    pub decoded: Vec<DecodedGraph>,
}

/// Picks the rationale most correlated with `graph` and decodes it.
pub fn explain(model: &GraphFnp, graph: &Graph, num_decodes: usize, seed: u64, opts: &ExplainOptions) -> Result<Explanation> {
    model.require_rationales()?;
    let out = predict_distribution(model, graph, opts.num_samples, derive_seed(seed, &[0]))?;
    let index = out.top_rationale().ok_or_else(|| Error::Contract("prediction carries no correlations".into()))?;
    let decoded = explain_rationale(model, index, num_decodes, derive_seed(seed, &[1]), opts.max_nodes)?;
    Ok(Explanation {
        graph_id: graph.id.clone(),
        label: graph.label,
        prediction: out.predicted_label,
        confidence: out.confidence,
        mean_probs: out.mean_probs,
        mean_correlation: out.mean_correlation.unwrap_or_default(),
        mean_kernel: out.mean_kernel.unwrap_or_default(),
        rationale_index: index,
        rationale_class: decoded.rationale_class,
        decoded: decoded.decoded,
    })
}

/// Decodes one rationale directly.
pub fn explain_rationale(model: &GraphFnp, index: usize, num_decodes: usize, seed: u64, max_nodes: usize) -> Result<RationaleExplanation> {
    let graphs = decode_rationale(model, index, num_decodes, seed, max_nodes)?;
    Ok(RationaleExplanation {
        rationale_index: index,
        rationale_class: model.rationales.class_of[index],
        decoded: graphs.iter().map(DecodedGraph::from).collect(),
    })
}

pub const RELIABILITY_CSV_HEADER: &str = "lower,upper,count,avg_confidence,avg_accuracy";

pub fn reliability_csv(report: &CalibrationReport) -> String {
    let mut out = format!("{RELIABILITY_CSV_HEADER}\n");
    for b in &report.bins {
        let _ = writeln!(out, "{},{},{},{},{}", b.lower, b.upper, b.count, b.avg_confidence, b.avg_accuracy);
    }
    out
}

/// Graphviz rendering; nodes show their type, edges theirs.
pub fn to_dot(graph: &DecodedGraph) -> String {
    let mut out = format!("graph \"{}\" {{\n", graph.id.replace('"', "'"));
    for (v, t) in graph.node_types.iter().enumerate() {
        let _ = writeln!(out, "  {v} [label=\"{v}:t{t}\"];");
    }
    for [a, b, k] in &graph.edges {
        let _ = writeln!(out, "  {a} -- {b} [label=\"e{k}\"];");
    }
    out.push_str("}\n");
    out
}
