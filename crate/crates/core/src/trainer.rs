//! Alternating optimization: the E-step updates the rationale bank and the
//! decoder, the M-step updates the encoder, the classifier and the
//! variational posterior.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{bfs_sequence, GenerationSequence, TieBreak};
use crate::encoder::{GaussianEmbedding, GaussianVar};
use crate::error::{ensure, Error, Result};
use crate::fnp::{argmax, correlate, predict_distribution, CorrelationMode, DrawNoise};
use crate::graph::{minibatch, Dataset, Graph, SplitSpec};
use crate::model::{Ablation, Ablations, GraphFnp, ModelConfig};
use crate::nn::{Adam, Gradients, Mat, ParamGroup, Tape, Var};
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub gcn_layers: usize,
    #[serde(alias = "R_k")]
    pub rationales_per_class: usize,
    pub rationale_dim: usize,
    pub decoder_hidden_dim: usize,
    pub decoder_layers: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub decoder_finetune_lr: f64,
    /// Trailing decoder-only epochs at `decoder_finetune_lr`.
    pub decoder_finetune_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Full passes over the training set per cycle for each step type.
    pub e_steps_per_cycle: usize,
    pub m_steps_per_cycle: usize,
    pub gumbel_tau_start: f64,
    pub gumbel_tau_end: f64,
    /// Hard correlations in the forward pass with relaxed gradients.
    pub straight_through: bool,
    pub mc_samples_train: usize,
    pub mc_samples_eval: usize,
    pub max_nodes: usize,
    pub ece_bins: usize,
    pub seed: u64,
    pub ablation: Ablations,
    pub split: SplitSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            latent_dim: 32,
            hidden_dim: 64,
            gcn_layers: 3,
            rationales_per_class: 5,
            rationale_dim: 32,
            decoder_hidden_dim: 32,
            decoder_layers: 2,
            gamma: 1.0,
            learning_rate: 1e-3,
            decoder_finetune_lr: 1e-5,
            decoder_finetune_epochs: 0,
            epochs: 40,
            batch_size: 32,
            e_steps_per_cycle: 1,
            m_steps_per_cycle: 1,
            gumbel_tau_start: 1.0,
            gumbel_tau_end: 0.1,
            straight_through: true,
            mc_samples_train: 1,
            mc_samples_eval: 16,
            max_nodes: crate::decoder::DEFAULT_MAX_NODES,
            ece_bins: 10,
            seed: 0,
            ablation: Ablations::new(),
            split: SplitSpec::default(),
        }
    }
}

impl TrainConfig {
    /// Dimensions used for full-scale runs.
    pub fn full_scale() -> Self {
        TrainConfig {
            latent_dim: 256,
            hidden_dim: 256,
            rationale_dim: 256,
            decoder_hidden_dim: 256,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("hidden_dim", self.hidden_dim),
            ("gcn_layers", self.gcn_layers),
            ("rationales_per_class", self.rationales_per_class),
            ("rationale_dim", self.rationale_dim),
            ("decoder_hidden_dim", self.decoder_hidden_dim),
            ("decoder_layers", self.decoder_layers),
            ("batch_size", self.batch_size),
            ("e_steps_per_cycle", self.e_steps_per_cycle),
            ("m_steps_per_cycle", self.m_steps_per_cycle),
            ("mc_samples_train", self.mc_samples_train),
            ("mc_samples_eval", self.mc_samples_eval),
            ("max_nodes", self.max_nodes),
            ("ece_bins", self.ece_bins),
        ];
        for (key, v) in positive {
            ensure!(v >= 1, Config, "{key} must be >= 1, got {v}");
        }
        for (key, v) in [
            ("gamma", self.gamma),
            ("learning_rate", self.learning_rate),
            ("decoder_finetune_lr", self.decoder_finetune_lr),
            ("gumbel_tau_start", self.gumbel_tau_start),
            ("gumbel_tau_end", self.gumbel_tau_end),
        ] {
            ensure!(v > 0.0 && v.is_finite(), Config, "{key} must be positive and finite, got {v}");
        }
        ensure!(self.gumbel_tau_end <= self.gumbel_tau_start, Config, "gumbel_tau_end ({}) exceeds gumbel_tau_start ({})", self.gumbel_tau_end, self.gumbel_tau_start);
        self.split.validate().map_err(|e| Error::Config(format!("split: {e}")))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_config(&self, ds: &Dataset) -> ModelConfig {
        ModelConfig {
            feature_dim: ds.feature_dim,
            num_classes: ds.num_classes,
            num_node_types: ds.num_node_types,
            num_edge_types: ds.num_edge_types,
            latent_dim: self.latent_dim,
            hidden_dim: self.hidden_dim,
            gcn_layers: self.gcn_layers,
            rationales_per_class: self.rationales_per_class,
            rationale_dim: self.rationale_dim,
            decoder_hidden_dim: self.decoder_hidden_dim,
            decoder_layers: self.decoder_layers,
            gamma: self.gamma,
            ablation: self.ablation.clone(),
        }
    }

    /// Geometric annealing from `gumbel_tau_start` at epoch 0 to
    /// `gumbel_tau_end` at the last epoch.
    pub fn tau_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.gumbel_tau_start;
        }
        let frac = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
        self.gumbel_tau_start * (self.gumbel_tau_end / self.gumbel_tau_start).powf(frac)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EComponents {
    pub cls_data: f64,
    pub generation: f64,
    pub cls_rationale: f64,
}

impl EComponents {
    pub fn total(&self) -> f64 {
        self.cls_data + self.generation + self.cls_rationale
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MComponents {
    pub cls_data: f64,
    pub prior_regularization: f64,
    pub cls_rationale: f64,
}

impl MComponents {
    pub fn total(&self) -> f64 {
        self.cls_data + self.prior_regularization + self.cls_rationale
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Em,
    DecoderFinetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Em => "em",
            Phase::DecoderFinetune => "decoder_finetune",
        }
    }
}

/// Per-epoch loss components averaged over optimizer steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub phase: Phase,
    pub gumbel_tau: f64,
    pub e_loss: EComponents,
    pub m_loss: MComponents,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BfsStart {
    /// Node 0.
    Canonical,
    /// Uniform per graph, drawn from the step seed.
    Random,
}

/// Everything that fixes the randomness of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct StepContext {
    pub seed: u64,
    pub temperature: f64,
    pub straight_through: bool,
    pub mc_samples: usize,
    pub bfs_start: BfsStart,
}

impl StepContext {
    pub fn new(seed: u64, temperature: f64) -> Self {
        StepContext {
            seed,
            temperature,
            straight_through: false,
            mc_samples: 1,
            bfs_start: BfsStart::Canonical,
        }
    }

    fn mode(&self) -> CorrelationMode {
        CorrelationMode::Relaxed {
            temperature: self.temperature,
            straight_through: self.straight_through,
        }
    }
}

pub struct StepLoss {
    pub e: EComponents,
    pub m: MComponents,
    pub total: f64,
    pub grads: Gradients,
}

pub const E_GROUPS: [ParamGroup; 2] = [ParamGroup::ThetaR, ParamGroup::ThetaD];
pub const M_GROUPS: [ParamGroup; 3] = [ParamGroup::ThetaE, ParamGroup::ThetaCls, ParamGroup::Phi];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Objective {
    E,
    M,
    Joint,
    Generation,
}

impl Objective {
    fn groups(self) -> &'static [ParamGroup] {
        match self {
            Objective::E => &E_GROUPS,
            Objective::M => &M_GROUPS,
            Objective::Joint => &ParamGroup::ALL,
            Objective::Generation => &[ParamGroup::ThetaD],
        }
    }

    fn has_e(self) -> bool {
        matches!(self, Objective::E | Objective::Joint)
    }

    fn has_m(self) -> bool {
        matches!(self, Objective::M | Objective::Joint)
    }
}

const BATCH_STREAM: u64 = u64::MAX;
const BFS_STREAM: u64 = u64::MAX - 1;

/// Noise for draw `s` of batch item `item`.
pub fn graph_noise(ctx: &StepContext, item: usize, draw: usize, latent_dim: usize, num_rationales: usize) -> DrawNoise {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ctx.seed, &[item as u64, draw as u64]));
    DrawNoise::sample(&mut rng, latent_dim, num_rationales)
}

/// Rationale noise shared by every graph of a batch: the draw of `Z^R`
/// and the draw of the rationales' own local embeddings.
fn batch_noise(ctx: &StepContext, latent_dim: usize, num_rationales: usize) -> (Mat, Mat) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ctx.seed, &[BATCH_STREAM]));
    let mut draw = || Mat::from_shape_simple_fn((num_rationales, latent_dim), || rng.sample(StandardNormal));
    let z = draw();
    (z, draw())
}

/// BFS sequence of the connected component containing the chosen start node.
pub fn training_sequence(model: &GraphFnp, graph: &Graph, ctx: &StepContext, item: usize) -> Result<GenerationSequence> {
    let start = match ctx.bfs_start {
        BfsStart::Canonical => 0,
        BfsStart::Random => ChaCha8Rng::seed_from_u64(derive_seed(ctx.seed, &[BFS_STREAM, item as u64])).random_range(0..graph.num_nodes()),
    };
    if graph.is_connected() {
        return bfs_sequence(graph, start, TieBreak::ByIndex, model.decoder.vocab);
    }
    let comp = graph.component(start);
    let mut members = graph.bfs_order(start);
    members.sort_unstable();
    let local = members.binary_search(&start).expect("start is in its component");
    bfs_sequence(&comp, local, TieBreak::ByIndex, model.decoder.vocab)
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians.
pub fn gaussian_kl(q: &GaussianEmbedding, p: &GaussianEmbedding) -> f64 {
    (0..q.dim())
        .map(|i| {
            let (mq, lq, mp, lp) = (q.mean[i], q.log_variance[i], p.mean[i], p.log_variance[i]);
            0.5 * (lp - lq + (lq.exp() + (mq - mp).powi(2)) / lp.exp() - 1.0)
        })
        .sum()
}

pub(crate) fn kl_var(tape: &mut Tape, q: GaussianVar, p: GaussianVar) -> Var {
    let var_q = tape.exp(q.log_variance);
    let neg_lp = tape.scale(p.log_variance, -1.0);
    let inv_var_p = tape.exp(neg_lp);
    let diff = tape.sub(q.mean, p.mean);
    let sq = tape.mul(diff, diff);
    let num = tape.add(var_q, sq);
    let ratio = tape.mul(num, inv_var_p);
    let lv_gap = tape.sub(p.log_variance, q.log_variance);
    let inner = tape.add(lv_gap, ratio);
    let dim = tape.value(inner).len() as f64;
    let sum = tape.sum_all(inner);
    let half = tape.scale(sum, 0.5);
    let offset = tape.constant(Mat::from_elem((1, 1), -0.5 * dim));
    tape.add(half, offset)
}

fn cross_entropy(model: &GraphFnp, tape: &mut Tape, z: Var, u: Var, label: usize) -> Var {
    let logits = model.head.logits(tape, &model.params, z, u);
    let lp = tape.log_softmax(logits);
    let picked = tape.pick_sum(lp, vec![label]);
    tape.scale(picked, -1.0)
}

fn mean_of(tape: &mut Tape, vars: Vec<Var>) -> Option<Var> {
    let n = vars.len() as f64;
    let sum = vars.into_iter().reduce(|a, b| tape.add(a, b))?;
    Some(tape.scale(sum, 1.0 / n))
}

#[derive(Default)]
struct GraphTerms {
    e_ce: Option<Var>,
    generation: Option<Var>,
    m_ce: Option<Var>,
    kl: Option<Var>,
}

fn graph_terms(model: &GraphFnp, tape: &mut Tape, graph: &Graph, item: usize, ctx: &StepContext, shared: &Mat, objective: Objective) -> Result<GraphTerms> {
    let cfg = &model.config;
    let store = &model.params;
    let l = cfg.latent_dim;
    let r = model.num_rationales();
    let enc = model.encoder.forward(tape, store, graph)?;
    let mut terms = GraphTerms::default();
    if objective == Objective::Generation {
        let noise = graph_noise(ctx, item, 0, l, r);
        let z = enc.embedding.sample(tape, row(&noise.graph));
        let seq = training_sequence(model, graph, ctx, item)?;
        let ll = model.decoder.log_likelihood(tape, store, &seq, z)?;
        terms.generation = Some(tape.scale(ll, -1.0));
        return Ok(terms);
    }
    let zr = cfg.uses_rationales().then(|| {
        let g = model.rationales.forward(tape, store);
        g.sample(tape, shared.clone())
    });
    let (mut e_ce, mut m_ce, mut kl) = (Vec::new(), Vec::new(), Vec::new());
    for s in 0..ctx.mc_samples {
        let noise = graph_noise(ctx, item, s, l, r);
        let z = enc.embedding.sample(tape, row(&noise.graph));
        let z_in = if cfg.has(Ablation::NoGraphEmbedding) { tape.zeros(1, l) } else { z };
        let prior = zr.map(|zr| {
            let corr = correlate(tape, z, zr, cfg.gamma, ctx.mode(), cfg.has(Ablation::NoCorrelationSampling), &noise.uniform);
            model.head.local(tape, store, corr.c, zr)
        });
        if objective.has_e() {
            let u = match prior {
                Some(p) => p.sample(tape, row(&noise.local)),
                None => tape.zeros(1, l),
            };
            e_ce.push(cross_entropy(model, tape, z_in, u, graph.label));
            if s == 0 {
                let seq = training_sequence(model, graph, ctx, item)?;
                let ll = model.decoder.log_likelihood(tape, store, &seq, z)?;
                terms.generation = Some(tape.scale(ll, -1.0));
            }
        }
        if objective.has_m() {
            let u = match prior {
                Some(p) => {
                    let q = model.head.posterior(tape, store, enc.pooled);
                    kl.push(kl_var(tape, q, p));
                    q.sample(tape, row(&noise.local))
                }
                None => tape.zeros(1, l),
            };
            m_ce.push(cross_entropy(model, tape, z_in, u, graph.label));
        }
    }
    terms.e_ce = mean_of(tape, e_ce);
    terms.m_ce = mean_of(tape, m_ce);
    terms.kl = mean_of(tape, kl);
    Ok(terms)
}

/// Mean cross-entropy of classifying every rationale sample as its own class.
fn rationale_cross_entropy(model: &GraphFnp, tape: &mut Tape, shared: &Mat, local: &Mat) -> Var {
    let store = &model.params;
    let zr = model.rationales.forward(tape, store).sample(tape, shared.clone());
    let ur = model.head.project(tape, store, zr).sample(tape, local.clone());
    let logits = model.head.logits(tape, store, zr, ur);
    let lp = tape.log_softmax(logits);
    let picked = tape.pick_sum(lp, model.rationales.class_of.clone());
    tape.scale(picked, -1.0 / model.num_rationales() as f64)
}

fn batch_loss(model: &GraphFnp, batch: &[&Graph], ctx: &StepContext, objective: Objective) -> Result<StepLoss> {
    ensure!(!batch.is_empty(), Argument, "empty batch");
    ensure!(ctx.mc_samples >= 1, Argument, "mc_samples must be >= 1");
    let groups = objective.groups();
    let b = batch.len() as f64;
    let (shared, local) = batch_noise(ctx, model.config.latent_dim, model.num_rationales());

    let per_graph: Vec<([f64; 4], Gradients)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let mut tape = Tape::new(groups);
            let t = graph_terms(model, &mut tape, g, i, ctx, &shared, objective)?;
            let parts = [t.e_ce, t.generation, t.m_ce, t.kl];
            let values = parts.map(|v| v.map_or(0.0, |v| tape.scalar(v)));
            let grads = match parts.into_iter().flatten().reduce(|a, c| tape.add(a, c)) {
                Some(total) => {
                    let scaled = tape.scale(total, 1.0 / b);
                    tape.backward(scaled, &model.params)
                }
                None => Gradients::zeros_like_none(&model.params),
            };
            Ok((values, grads))
        })
        .collect::<Result<_>>()?;

    let mut grads = Gradients::zeros_like_none(&model.params);
    let mut sums = [0.0; 4];
    for (values, g) in per_graph {
        for (s, v) in sums.iter_mut().zip(values) {
            *s += v;
        }
        grads.merge(g);
    }
    let [e_ce, generation, m_ce, kl] = sums.map(|s| s / b);

    let mut cls_rationale = 0.0;
    if model.config.uses_rationales() && objective != Objective::Generation {
        let mut tape = Tape::new(groups);
        let mut ce = rationale_cross_entropy(model, &mut tape, &shared, &local);
        cls_rationale = tape.scalar(ce);
        if objective == Objective::Joint {
            ce = tape.scale(ce, 2.0);
        }
        grads.merge(tape.backward(ce, &model.params));
    }

    let e = if objective.has_e() || objective == Objective::Generation {
        EComponents {
            cls_data: e_ce,
            generation,
            cls_rationale: if objective.has_e() { cls_rationale } else { 0.0 },
        }
    } else {
        EComponents::default()
    };
    let m = if objective.has_m() {
        MComponents {
            cls_data: m_ce,
            prior_regularization: kl,
            cls_rationale,
        }
    } else {
        MComponents::default()
    };
    let total = e.total() + m.total();
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "loss not finite: e(cls_data={}, generation={}, cls_rationale={}) m(cls_data={}, prior_regularization={}, cls_rationale={})",
            e.cls_data, e.generation, e.cls_rationale, m.cls_data, m.prior_regularization, m.cls_rationale
        )));
    }
    Ok(StepLoss { e, m, total, grads })
}

/// E-step objective; gradients only for the rationale bank and the decoder.
pub fn e_step_loss(model: &GraphFnp, batch: &[&Graph], ctx: &StepContext) -> Result<StepLoss> {
    batch_loss(model, batch, ctx, Objective::E)
}

/// M-step objective; gradients only for the encoder, classifier and posterior.
pub fn m_step_loss(model: &GraphFnp, batch: &[&Graph], ctx: &StepContext) -> Result<StepLoss> {
    batch_loss(model, batch, ctx, Objective::M)
}

/// Sum of both objectives with gradients for every group.
pub fn joint_loss(model: &GraphFnp, batch: &[&Graph], ctx: &StepContext) -> Result<StepLoss> {
    batch_loss(model, batch, ctx, Objective::Joint)
}

/// Generation loss alone, for decoder fine-tuning.
pub fn generation_loss(model: &GraphFnp, batch: &[&Graph], ctx: &StepContext) -> Result<StepLoss> {
    batch_loss(model, batch, ctx, Objective::Generation)
}

/// Receives the model after every epoch.
pub trait CheckpointSink {
    /// Persists an epoch checkpoint and returns where it went, if anywhere.
    fn save(&mut self, model: &GraphFnp, epoch: usize) -> Result<Option<PathBuf>>;

    /// Called when validation accuracy reaches a new best.
    fn save_best(&mut self, _model: &GraphFnp, _epoch: usize) -> Result<()> {
        Ok(())
    }
}

pub struct NoCheckpoints;

impl CheckpointSink for NoCheckpoints {
    fn save(&mut self, _model: &GraphFnp, _epoch: usize) -> Result<Option<PathBuf>> {
        Ok(None)
    }
}

pub struct TrainOutcome {
    pub model: GraphFnp,
    pub reports: Vec<LossReport>,
    /// Epoch and accuracy of the best validation result.
    pub best_val: Option<(usize, f64)>,
}

/// Fresh model seeded from `cfg.seed`, then `train_model`.
pub fn train(train_set: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig, sink: &mut dyn CheckpointSink) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = GraphFnp::new(cfg.model_config(train_set), cfg.seed)?;
    train_model(model, train_set, val, cfg, sink)
}

pub fn accuracy(model: &GraphFnp, ds: &Dataset, num_samples: usize, seed: u64) -> Result<f64> {
    ensure!(!ds.is_empty(), Argument, "accuracy of an empty dataset");
    let hits = ds
        .graphs
        .par_iter()
        .enumerate()
        .map(|(i, g)| Ok(usize::from(predict_distribution(model, g, num_samples, derive_seed(seed, &[i as u64]))?.predicted_label == g.label)))
        .collect::<Result<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / ds.len() as f64)
}

struct Optimization<'a> {
    cfg: &'a TrainConfig,
    failures: usize,
    last_good: Option<PathBuf>,
}

impl Optimization<'_> {
    /// One optimizer step; a non-finite loss skips the update, and two in a
    /// row abort training.
    fn step(&mut self, model: &mut GraphFnp, adam: &mut Adam, batch: &[&Graph], ctx: &StepContext, objective: Objective) -> Result<Option<StepLoss>> {
        let result = batch_loss(model, batch, ctx, objective).and_then(|loss| {
            adam.step(&mut model.params, &loss.grads, objective.groups())?;
            Ok(loss)
        });
        match result {
            Ok(loss) => {
                self.failures = 0;
                Ok(Some(loss))
            }
            Err(Error::Numeric(msg)) => {
                self.failures += 1;
                log::warn!("skipping update: {msg}");
                if self.failures >= 2 {
                    return Err(Error::Diverged { last_good: self.last_good.clone() });
                }
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    fn passes(&mut self, model: &mut GraphFnp, adam: &mut Adam, data: &Dataset, epoch: usize, objective: Objective, passes: usize, tau: f64) -> Result<Vec<StepLoss>> {
        let tag = objective as u64;
        let mut losses = Vec::new();
        for pass in 0..passes {
            let shuffle = derive_seed(self.cfg.seed, &[epoch as u64, tag, pass as u64]);
            for (b, batch) in minibatch(data, self.cfg.batch_size, Some(shuffle)).enumerate() {
                let ctx = StepContext {
                    seed: derive_seed(shuffle, &[b as u64]),
                    temperature: tau,
                    straight_through: self.cfg.straight_through,
                    mc_samples: self.cfg.mc_samples_train,
                    bfs_start: BfsStart::Random,
                };
                if let Some(loss) = self.step(model, adam, &batch, &ctx, objective)? {
                    losses.push(loss);
                }
            }
        }
        Ok(losses)
    }
}

fn average(losses: &[StepLoss]) -> (EComponents, MComponents) {
    let n = losses.len().max(1) as f64;
    let mut e = EComponents::default();
    let mut m = MComponents::default();
    for l in losses {
        e.cls_data += l.e.cls_data / n;
        e.generation += l.e.generation / n;
        e.cls_rationale += l.e.cls_rationale / n;
        m.cls_data += l.m.cls_data / n;
        m.prior_regularization += l.m.prior_regularization / n;
        m.cls_rationale += l.m.cls_rationale / n;
    }
    (e, m)
}

/// Alternating training of an existing model, followed by the optional
/// decoder fine-tuning phase.
pub fn train_model(mut model: GraphFnp, train_set: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig, sink: &mut dyn CheckpointSink) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure!(!train_set.is_empty(), Argument, "training set is empty");
    let mut adam = Adam::new(cfg.learning_rate)?;
    let mut opt = Optimization {
        cfg,
        failures: 0,
        last_good: None,
    };
    let mut reports = Vec::new();
    let mut best_val: Option<(usize, f64)> = None;
    let joint = model.config.has(Ablation::NoAlternation);

    for epoch in 0..cfg.epochs {
        let tau = cfg.tau_at(epoch);
        let (e, m) = if joint {
            let passes = cfg.e_steps_per_cycle.max(cfg.m_steps_per_cycle);
            average(&opt.passes(&mut model, &mut adam, train_set, epoch, Objective::Joint, passes, tau)?)
        } else {
            let e_losses = opt.passes(&mut model, &mut adam, train_set, epoch, Objective::E, cfg.e_steps_per_cycle, tau)?;
            let m_losses = opt.passes(&mut model, &mut adam, train_set, epoch, Objective::M, cfg.m_steps_per_cycle, tau)?;
            (average(&e_losses).0, average(&m_losses).1)
        };
        let val_accuracy = match val {
            Some(v) if !v.is_empty() => Some(accuracy(&model, v, cfg.mc_samples_eval, derive_seed(cfg.seed, &[epoch as u64, 0x7a1]))?),
            _ => None,
        };
        log::info!(
            "epoch {epoch}: tau {tau:.4} e_loss {:.4} m_loss {:.4} val_acc {}",
            e.total(),
            m.total(),
            val_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
        );
        if let Some(acc) = val_accuracy {
            if best_val.is_none_or(|(_, b)| acc > b) {
                best_val = Some((epoch, acc));
                sink.save_best(&model, epoch)?;
            }
        }
        if let Some(path) = sink.save(&model, epoch)? {
            opt.last_good = Some(path);
        }
        reports.push(LossReport {
            epoch,
            phase: Phase::Em,
            gumbel_tau: tau,
            e_loss: e,
            m_loss: m,
            val_accuracy,
        });
    }

    if cfg.decoder_finetune_epochs > 0 {
        let mut finetune = Adam::new(cfg.decoder_finetune_lr)?;
        for k in 0..cfg.decoder_finetune_epochs {
            let epoch = cfg.epochs + k;
            let losses = opt.passes(&mut model, &mut finetune, train_set, epoch, Objective::Generation, 1, cfg.gumbel_tau_end)?;
            if let Some(path) = sink.save(&model, epoch)? {
                opt.last_good = Some(path);
            }
            reports.push(LossReport {
                epoch,
                phase: Phase::DecoderFinetune,
                gumbel_tau: cfg.gumbel_tau_end,
                e_loss: average(&losses).0,
                m_loss: MComponents::default(),
                val_accuracy: None,
            });
        }
    }
    Ok(TrainOutcome { model, reports, best_val })
}

pub const LOSS_CSV_HEADER: &str =
    "epoch,phase,gumbel_tau,e_cls_data,e_generation,e_cls_rationale,e_total,m_cls_data,m_prior_regularization,m_cls_rationale,m_total,val_accuracy";

pub fn loss_csv(reports: &[LossReport]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in reports {
        let val = r.val_accuracy.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.phase.as_str(),
            r.gumbel_tau,
            r.e_loss.cls_data,
            r.e_loss.generation,
            r.e_loss.cls_rationale,
            r.e_loss.total(),
            r.m_loss.cls_data,
            r.m_loss.prior_regularization,
            r.m_loss.cls_rationale,
            r.m_loss.total(),
            val
        );
    }
    out
}

/// Majority label of the mean predictive distribution, for quick checks.
pub fn predicted_labels(model: &GraphFnp, ds: &Dataset, num_samples: usize, seed: u64) -> Result<Vec<usize>> {
    ds.graphs
        .par_iter()
        .enumerate()
        .map(|(i, g)| Ok(argmax(&predict_distribution(model, g, num_samples, derive_seed(seed, &[i as u64]))?.mean_probs)))
        .collect()
}

fn row(v: &[f64]) -> Mat {
    Mat::from_shape_vec((1, v.len()), v.to_vec()).expect("row")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{encode, sample};
    use crate::graph::generate_ba_motif_dataset;
    use crate::nn::gradient_check;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            latent_dim: 4,
            hidden_dim: 8,
            gcn_layers: 2,
            rationales_per_class: 2,
            rationale_dim: 4,
            decoder_hidden_dim: 6,
            batch_size: 4,
            epochs: 2,
            mc_samples_eval: 2,
            ..TrainConfig::default()
        }
    }

    fn setup(cfg: &TrainConfig, count: usize) -> (GraphFnp, Dataset) {
        let ds = generate_ba_motif_dataset(count, (5, 6), 3).unwrap();
        (GraphFnp::new(cfg.model_config(&ds), cfg.seed).unwrap(), ds)
    }

    #[test]
    fn config_toml_round_trip_and_errors() {
        let cfg = TrainConfig {
            ablation: [Ablation::NoCorrelationSampling].into(),
            ..tiny_config()
        };
        assert_eq!(TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
        let partial = TrainConfig::from_toml_str("epochs = 3\nR_k = 2\n[split]\nseed = 4\n").unwrap();
        assert_eq!((partial.epochs, partial.rationales_per_class, partial.split.seed), (3, 2, 4));
        let err = TrainConfig::from_toml_str("epohcs = 3").unwrap_err().to_string();
        assert!(err.contains("epohcs"), "{err}");
        let err = TrainConfig::from_toml_str("learning_rate = \"fast\"").unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
        let err = TrainConfig::from_toml_str("gumbel_tau_end = 2.0").unwrap_err().to_string();
        assert!(err.contains("gumbel_tau_end"), "{err}");
        assert!(TrainConfig::from_toml_str("ablation = [\"no_Q\"]").is_err());
    }

    #[test]
    fn tau_schedule_is_monotone_geometric() {
        let cfg = TrainConfig { epochs: 11, ..TrainConfig::default() };
        assert_eq!(cfg.tau_at(0), 1.0);
        assert!((cfg.tau_at(10) - 0.1).abs() < 1e-12);
        assert!((cfg.tau_at(5) - 0.1f64.sqrt()).abs() < 1e-12);
        for e in 1..11 {
            assert!(cfg.tau_at(e) <= cfg.tau_at(e - 1));
        }
    }

    #[test]
    fn closed_form_kl() {
        let q = GaussianEmbedding { mean: vec![1.0; 3], log_variance: vec![0.0; 3] };
        assert_eq!(gaussian_kl(&q, &GaussianEmbedding::standard(3)), 1.5);
        assert_eq!(gaussian_kl(&q, &q), 0.0);

        let p = GaussianEmbedding { mean: vec![0.2, -0.5], log_variance: vec![0.3, -1.1] };
        let q = GaussianEmbedding { mean: vec![-0.4, 0.1], log_variance: vec![-0.2, 0.6] };
        let mut tape = Tape::default();
        let gv = |tape: &mut Tape, g: &GaussianEmbedding| GaussianVar { mean: tape.row(&g.mean), log_variance: tape.row(&g.log_variance) };
        let (qv, pv) = (gv(&mut tape, &q), gv(&mut tape, &p));
        let k = kl_var(&mut tape, qv, pv);
        assert!((tape.scalar(k) - gaussian_kl(&q, &p)).abs() < 1e-14);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let log_density = |g: &GaussianEmbedding, x: &[f64]| -> f64 {
            x.iter()
                .enumerate()
                .map(|(i, &xi)| -0.5 * (g.log_variance[i] + (xi - g.mean[i]).powi(2) / g.log_variance[i].exp() + (2.0 * std::f64::consts::PI).ln()))
                .sum()
        };
        for _ in 0..3 {
            let mut rand_g = || GaussianEmbedding {
                mean: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                log_variance: (0..3).map(|_| rng.random_range(-0.5..0.5)).collect(),
            };
            let (q, p) = (rand_g(), rand_g());
            let exact = gaussian_kl(&q, &p);
            let n = 100_000;
            let mc: f64 = (0..n)
                .map(|_| {
                    let eps: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
                    let x = sample(&q, &eps).unwrap();
                    log_density(&q, &x) - log_density(&p, &x)
                })
                .sum::<f64>()
                / n as f64;
            assert!((mc - exact).abs() <= 0.02 * exact, "{mc} vs {exact}");
        }
    }

    #[test]
    fn step_components_and_freeze_contract() {
        let cfg = tiny_config();
        let (model, ds) = setup(&cfg, 6);
        let batch: Vec<&Graph> = ds.graphs.iter().take(3).collect();
        let ctx = StepContext::new(11, 0.5);

        let e = e_step_loss(&model, &batch, &ctx).unwrap();
        assert!((e.total - e.e.total()).abs() < 1e-12);
        assert_eq!(e.m, MComponents::default());
        assert!(e.grads.is_zero_for(&model.params, &M_GROUPS));
        assert!(!e.grads.is_zero_for(&model.params, &[ParamGroup::ThetaR]));
        assert!(!e.grads.is_zero_for(&model.params, &[ParamGroup::ThetaD]));

        let m = m_step_loss(&model, &batch, &ctx).unwrap();
        assert!((m.total - m.m.total()).abs() < 1e-12);
        assert!(m.m.prior_regularization >= 0.0);
        assert!(m.grads.is_zero_for(&model.params, &E_GROUPS));
        for g in M_GROUPS {
            assert!(!m.grads.is_zero_for(&model.params, &[g]), "{g}");
        }

        let mut stepped = model.clone();
        let mut adam = Adam::new(1e-2).unwrap();
        adam.step(&mut stepped.params, &e.grads, &E_GROUPS).unwrap();
        assert!(stepped.params.same_values(&model.params, &M_GROUPS));
        assert!(!stepped.params.same_values(&model.params, &E_GROUPS));
        let before = stepped.params.clone();
        let m = m_step_loss(&stepped, &batch, &ctx).unwrap();
        adam.step(&mut stepped.params, &m.grads, &M_GROUPS).unwrap();
        assert!(stepped.params.same_values(&before, &E_GROUPS));
    }

    #[test]
    fn generation_component_isolated() {
        let cfg = tiny_config();
        let (model, ds) = setup(&cfg, 2);
        let g = &ds.graphs[0];
        let ctx = StepContext::new(2, 1.0);
        let loss = e_step_loss(&model, &[g], &ctx).unwrap();
        let noise = graph_noise(&ctx, 0, 0, 4, model.num_rationales());
        let (_, emb) = encode(&model, g).unwrap();
        let z = sample(&emb, &noise.graph).unwrap();
        let seq = bfs_sequence(g, 0, TieBreak::ByIndex, model.decoder.vocab).unwrap();
        let ll = model.decoder.sequence_log_likelihood(&model.params, &seq, &z).unwrap();
        assert!((loss.e.generation + ll).abs() < 1e-12, "{} vs {}", loss.e.generation, -ll);
    }

    #[test]
    fn gradient_checks_for_both_steps() {
        let cfg = tiny_config();
        let (model, ds) = setup(&cfg, 4);
        let batch: Vec<&Graph> = ds.graphs.iter().take(3).collect();
        let ctx = StepContext::new(8, 0.7);
        for (f, groups) in [(e_step_loss as fn(&GraphFnp, &[&Graph], &StepContext) -> Result<StepLoss>, &E_GROUPS[..]), (m_step_loss, &M_GROUPS[..])] {
            let loss = |store: &crate::nn::ParamStore| {
                let mut m = model.clone();
                m.params = store.clone();
                let l = f(&m, &batch, &ctx)?;
                Ok((l.total, l.grads))
            };
            let report = gradient_check(loss, &model.params, groups, 1e-5).unwrap();
            assert!(report.max_relative_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let cfg = TrainConfig { epochs: 0, ..tiny_config() };
        let (model, ds) = setup(&cfg, 4);
        let out = train(&ds, None, &cfg, &mut NoCheckpoints).unwrap();
        assert!(out.reports.is_empty());
        assert!(out.model.params.same_values(&model.params, &ParamGroup::ALL));
    }

    #[test]
    fn joint_mode_updates_every_group() {
        let cfg = TrainConfig {
            epochs: 1,
            ablation: [Ablation::NoAlternation].into(),
            ..tiny_config()
        };
        let (model, ds) = setup(&cfg, 4);
        let small = ds.with_graphs(ds.graphs[..2].to_vec());
        let out = train(&small, None, &TrainConfig { batch_size: 2, ..cfg }, &mut NoCheckpoints).unwrap();
        for g in ParamGroup::ALL {
            assert!(!out.model.params.same_values(&model.params, &[g]), "{g} unchanged");
        }
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = tiny_config();
        let (_, ds) = setup(&cfg, 8);
        let val = ds.with_graphs(ds.graphs[..2].to_vec());
        let a = train(&ds, Some(&val), &cfg, &mut NoCheckpoints).unwrap();
        let b = train(&ds, Some(&val), &cfg, &mut NoCheckpoints).unwrap();
        assert_eq!(a.reports, b.reports);
        assert_eq!(loss_csv(&a.reports), loss_csv(&b.reports));
        assert!(a.model.params.same_values(&b.model.params, &ParamGroup::ALL));
        assert_eq!(a.reports.len(), 2);
        assert!(a.reports.iter().all(|r| r.val_accuracy.is_some() && r.e_loss.total().is_finite() && r.m_loss.total().is_finite()));
        assert_eq!(loss_csv(&a.reports).lines().count(), 3);
    }

    #[test]
    fn finetune_phase_touches_only_decoder() {
        let cfg = TrainConfig {
            epochs: 0,
            decoder_finetune_epochs: 1,
            decoder_finetune_lr: 1e-3,
            ..tiny_config()
        };
        let (model, ds) = setup(&cfg, 4);
        let out = train(&ds, None, &cfg, &mut NoCheckpoints).unwrap();
        assert_eq!(out.reports.len(), 1);
        assert_eq!(out.reports[0].phase, Phase::DecoderFinetune);
        assert!(out.model.params.same_values(&model.params, &[ParamGroup::ThetaE, ParamGroup::ThetaR, ParamGroup::ThetaCls, ParamGroup::Phi]));
        assert!(!out.model.params.same_values(&model.params, &[ParamGroup::ThetaD]));
    }

    struct Recording(Vec<usize>);

    impl CheckpointSink for Recording {
        fn save(&mut self, _model: &GraphFnp, epoch: usize) -> Result<Option<PathBuf>> {
            self.0.push(epoch);
            Ok(Some(PathBuf::from(format!("epoch{epoch}"))))
        }
    }

    #[test]
    fn divergence_aborts_with_last_good_checkpoint() {
        let cfg = tiny_config();
        let (model, ds) = setup(&cfg, 4);
        let mut sink = Recording(Vec::new());
        let ok = train_model(model.clone(), &ds, None, &cfg, &mut sink).unwrap();
        assert_eq!(sink.0, vec![0, 1]);

        let mut broken = ok.model;
        let id = broken.head.classifier.layers[0].weight;
        broken.params.value_mut(id).fill(f64::NAN);
        match train_model(broken, &ds, None, &cfg, &mut sink) {
            Err(Error::Diverged { last_good }) => assert_eq!(last_good, None),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.reports)),
        }
    }
}
