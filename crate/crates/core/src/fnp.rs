//! Correlation kernel, stochastic correlations between graphs and
//! rationales, the local rationale embedding, the classifier, and the
//! amortized posterior over the local embedding.

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::{gaussian_heads, GaussianEmbedding, GaussianVar};
use crate::error::{ensure, Result};
use crate::graph::Graph;
use crate::model::{Ablation, GraphFnp, ModelConfig};
use crate::nn::{sigmoid, Mat, Mlp, MlpSpec, ParamGroup, ParamStore, Tape, Var};

/// Largest kernel value fed to the relaxed sampler.
pub const KAPPA_CEILING: f64 = 1.0 - 1e-6;

/// `exp(-γ‖a − b‖)` with the plain (unsquared) Euclidean norm.
pub fn kernel(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let dist = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    (-gamma * dist).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    /// `C = 1{u < κ}`.
    Hard,
    /// Binary-concrete relaxation; with `straight_through` the forward value
    /// is the hard sample and gradients follow the relaxed one.
    Relaxed { temperature: f64, straight_through: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationSample {
    pub values: Mat,
    pub mode: CorrelationMode,
}

/// Relaxed Bernoulli sample: `sigmoid((logit κ + log((1 − u)/u)) / τ)`.
/// As `τ → 0` it tends to the hard sample `1{u < κ}` for the same noise.
pub fn relaxed_bernoulli(kappa: f64, u: f64, temperature: f64) -> f64 {
    let k = kappa.min(KAPPA_CEILING);
    let logit = k.ln() - (-k).ln_1p();
    sigmoid((logit + ((1.0 - u) / u).ln()) / temperature)
}

/// Samples a correlation matrix from kernel values and uniform noise of the same shape.
pub fn sample_correlations(kappa: &Mat, mode: CorrelationMode, noise: &Mat) -> Result<CorrelationSample> {
    ensure!(kappa.dim() == noise.dim(), Shape, "kappa {:?} vs noise {:?}", kappa.dim(), noise.dim());
    ensure!(kappa.iter().all(|&k| k > 0.0 && k <= 1.0), Argument, "kappa entries must lie in (0, 1]");
    let values = match mode {
        CorrelationMode::Hard => ndarray::Zip::from(kappa).and(noise).map_collect(|&k, &u| f64::from(u8::from(u < k))),
        CorrelationMode::Relaxed { temperature, straight_through } => {
            ensure!(temperature > 0.0, Argument, "temperature must be positive");
            ndarray::Zip::from(kappa).and(noise).map_collect(|&k, &u| {
                if straight_through {
                    f64::from(u8::from(u < k))
                } else {
                    relaxed_bernoulli(k, u, temperature)
                }
            })
        }
    };
    Ok(CorrelationSample { values, mode })
}

pub(crate) struct CorrelationVars {
    pub kappa: Var,
    pub c: Var,
}

/// Kernel row between one graph sample `z` (1×l) and rationale samples
/// `zr` (|R|×l), then correlations for `mode`; `raw_kernel` uses κ itself.
pub(crate) fn correlate(tape: &mut Tape, z: Var, zr: Var, gamma: f64, mode: CorrelationMode, raw_kernel: bool, uniform: &[f64]) -> CorrelationVars {
    let r = tape.value(zr).nrows();
    let zs = tape.repeat_row(z, r);
    let diff = tape.sub(zs, zr);
    let dist = tape.row_norms(diff);
    let log_kappa = tape.scale(dist, -gamma);
    let kappa = tape.exp(log_kappa);
    if raw_kernel {
        return CorrelationVars { kappa, c: kappa };
    }
    let hard: Mat = Mat::from_shape_fn((1, r), |(_, j)| f64::from(u8::from(uniform[j] < tape.value(kappa)[[0, j]])));
    let c = match mode {
        CorrelationMode::Hard => tape.constant(hard),
        CorrelationMode::Relaxed { temperature, straight_through } => {
            let log_one_minus = tape.log1m(kappa, KAPPA_CEILING);
            let logit = tape.sub(log_kappa, log_one_minus);
            let noise = tape.row(&uniform.iter().map(|&u| ((1.0 - u) / u).ln()).collect::<Vec<_>>());
            let shifted = tape.add(logit, noise);
            let scaled = tape.scale(shifted, 1.0 / temperature);
            let relaxed = tape.sigmoid(scaled);
            if straight_through {
                tape.straight_through(relaxed, hard)
            } else {
                relaxed
            }
        }
    };
    CorrelationVars { kappa, c }
}

#[derive(Clone, Debug)]
pub struct FnpHead {
    pub u_mean: Mlp,
    pub u_log_variance: Mlp,
    pub classifier: Mlp,
    pub q_mean: Mlp,
    pub q_log_variance: Mlp,
}

impl FnpHead {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let l = cfg.latent_dim;
        let h = cfg.hidden_dim;
        let cls = ParamGroup::ThetaCls;
        Ok(FnpHead {
            u_mean: Mlp::new(store, cls, "u_mean", MlpSpec::new(l, h, l, 2), rng)?,
            u_log_variance: Mlp::new(store, cls, "u_log_variance", MlpSpec::new(l, h, l, 2), rng)?,
            classifier: Mlp::new(store, cls, "classifier", MlpSpec::new(2 * l, h, cfg.num_classes, 3), rng)?,
            q_mean: Mlp::new(store, ParamGroup::Phi, "q_mean", MlpSpec::new(h, h, l, 2), rng)?,
            q_log_variance: Mlp::new(store, ParamGroup::Phi, "q_log_variance", MlpSpec::new(h, h, l, 2), rng)?,
        })
    }

    /// Row-wise projection of rationale samples into the local-embedding space.
    pub(crate) fn project(&self, tape: &mut Tape, store: &ParamStore, zr: Var) -> GaussianVar {
        gaussian_heads(tape, store, &self.u_mean, &self.u_log_variance, zr)
    }

    /// Correlation-weighted average of projected rationales, normalized by
    /// `max(1, Σ C)`; an all-zero row yields exactly `N(0, I)`.
    pub(crate) fn local(&self, tape: &mut Tape, store: &ParamStore, c: Var, zr: Var) -> GaussianVar {
        let proj = self.project(tape, store, zr);
        let mass = tape.sum_all(c);
        let denom = tape.at_least_one(mass);
        let inv = tape.recip(denom);
        let mean_sum = tape.matmul(c, proj.mean);
        let lv_sum = tape.matmul(c, proj.log_variance);
        GaussianVar {
            mean: tape.mul_scalar(mean_sum, inv),
            log_variance: tape.mul_scalar(lv_sum, inv),
        }
    }

    pub(crate) fn logits(&self, tape: &mut Tape, store: &ParamStore, z: Var, u: Var) -> Var {
        let x = tape.concat_cols(&[z, u]);
        self.classifier.forward(tape, store, x)
    }

    pub(crate) fn posterior(&self, tape: &mut Tape, store: &ParamStore, pooled: Var) -> GaussianVar {
        gaussian_heads(tape, store, &self.q_mean, &self.q_log_variance, pooled)
    }
}

pub fn local_rationale_embedding(model: &GraphFnp, c_row: &[f64], rationale_samples: &[Vec<f64>]) -> Result<GaussianEmbedding> {
    let l = model.config.latent_dim;
    ensure!(c_row.len() == rationale_samples.len() && !c_row.is_empty(), Shape, "{} correlations for {} rationales", c_row.len(), rationale_samples.len());
    ensure!(rationale_samples.iter().all(|z| z.len() == l), Shape, "rationale samples must have length {l}");
    let mut tape = Tape::default();
    let c = tape.row(c_row);
    let flat: Vec<f64> = rationale_samples.iter().flatten().copied().collect();
    let zr = tape.constant(Mat::from_shape_vec((rationale_samples.len(), l), flat).expect("checked shape"));
    let u = model.head.local(&mut tape, &model.params, c, zr);
    Ok(GaussianEmbedding::from_tape(&tape, u))
}

pub fn classify(model: &GraphFnp, z: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    let l = model.config.latent_dim;
    ensure!(z.len() == l && u.len() == l, Shape, "classifier expects two vectors of length {l}");
    let mut tape = Tape::default();
    let z = tape.row(z);
    let u = tape.row(u);
    let logits = model.head.logits(&mut tape, &model.params, z, u);
    let lp = tape.log_softmax(logits);
    Ok(tape.value(lp).iter().map(|x| x.exp()).collect())
}

pub fn variational_posterior(model: &GraphFnp, pooled: &[f64]) -> Result<GaussianEmbedding> {
    ensure!(pooled.len() == model.config.hidden_dim, Shape, "pooled length {} != {}", pooled.len(), model.config.hidden_dim);
    let mut tape = Tape::default();
    let h = tape.row(pooled);
    let q = model.head.posterior(&mut tape, &model.params, h);
    Ok(GaussianEmbedding::from_tape(&tape, q))
}

/// Noise consumed by one Monte Carlo draw of the predictive distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct DrawNoise {
    pub graph: Vec<f64>,
    pub rationales: Mat,
    pub uniform: Vec<f64>,
    pub local: Vec<f64>,
}

impl DrawNoise {
    pub fn sample(rng: &mut impl Rng, latent_dim: usize, num_rationales: usize) -> Self {
        let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
        let graph = normal(latent_dim);
        let rationales = Mat::from_shape_vec((num_rationales, latent_dim), normal(num_rationales * latent_dim)).expect("shape");
        let local = normal(latent_dim);
        let uniform = (0..num_rationales).map(|_| rng.sample(Open01)).collect();
        DrawNoise {
            graph,
            rationales,
            uniform,
            local,
        }
    }

    pub fn zeros(latent_dim: usize, num_rationales: usize) -> Self {
        DrawNoise {
            graph: vec![0.0; latent_dim],
            rationales: Mat::zeros((num_rationales, latent_dim)),
            uniform: vec![0.5; num_rationales],
            local: vec![0.0; latent_dim],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveOutput {
    /// One class distribution per Monte Carlo draw.
    pub probs: Vec<Vec<f64>>,
    pub mean_probs: Vec<f64>,
    pub predicted_label: usize,
    pub confidence: f64,
    /// Average sampled correlation per rationale (absent without rationales).
    pub mean_correlation: Option<Vec<f64>>,
    /// Average kernel value per rationale.
    pub mean_kernel: Option<Vec<f64>>,
}

impl PredictiveOutput {
    /// Most correlated rationale; ties on the averaged correlation fall back
    /// to the averaged kernel value, then to the lower index.
    pub fn top_rationale(&self) -> Option<usize> {
        let c = self.mean_correlation.as_ref()?;
        let k = self.mean_kernel.as_ref()?;
        (0..c.len()).reduce(|best, j| {
            if c[j] > c[best] || (c[j] == c[best] && k[j] > k[best]) {
                j
            } else {
                best
            }
        })
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    (0..xs.len()).reduce(|best, j| if xs[j] > xs[best] { j } else { best }).unwrap_or(0)
}

/// Predictive distribution from explicit per-draw noise.
pub fn predict_with_noise(model: &GraphFnp, graph: &Graph, draws: &[DrawNoise]) -> Result<PredictiveOutput> {
    ensure!(!draws.is_empty(), Argument, "need at least one Monte Carlo draw");
    let cfg = &model.config;
    let store = &model.params;
    let mut tape = Tape::default();
    let enc = model.encoder.forward(&mut tape, store, graph)?;
    let rationales = cfg.uses_rationales().then(|| model.rationales.forward(&mut tape, store));
    let r = model.num_rationales();
    let mut probs = Vec::with_capacity(draws.len());
    let mut sum_c = vec![0.0; r];
    let mut sum_k = vec![0.0; r];
    for noise in draws {
        let z = enc.embedding.sample(&mut tape, row(&noise.graph));
        let u = match rationales {
            Some(rg) => {
                let zr = rg.sample(&mut tape, noise.rationales.clone());
                let corr = correlate(&mut tape, z, zr, cfg.gamma, CorrelationMode::Hard, cfg.has(Ablation::NoCorrelationSampling), &noise.uniform);
                for j in 0..r {
                    sum_c[j] += tape.value(corr.c)[[0, j]];
                    sum_k[j] += tape.value(corr.kappa)[[0, j]];
                }
                let local = model.head.local(&mut tape, store, corr.c, zr);
                local.sample(&mut tape, row(&noise.local))
            }
            None => tape.zeros(1, cfg.latent_dim),
        };
        let z_in = if cfg.has(Ablation::NoGraphEmbedding) { tape.zeros(1, cfg.latent_dim) } else { z };
        let logits = model.head.logits(&mut tape, store, z_in, u);
        let lp = tape.log_softmax(logits);
        probs.push(tape.value(lp).iter().map(|x| x.exp()).collect::<Vec<f64>>());
    }
    let s = draws.len() as f64;
    let k = cfg.num_classes;
    let mean_probs: Vec<f64> = (0..k).map(|c| probs.iter().map(|p| p[c]).sum::<f64>() / s).collect();
    let predicted_label = argmax(&mean_probs);
    Ok(PredictiveOutput {
        confidence: mean_probs[predicted_label],
        predicted_label,
        mean_probs,
        probs,
        mean_correlation: rationales.map(|_| sum_c.iter().map(|x| x / s).collect()),
        mean_kernel: rationales.map(|_| sum_k.iter().map(|x| x / s).collect()),
    })
}

/// Monte Carlo predictive distribution with `num_samples` draws seeded by `seed`.
pub fn predict_distribution(model: &GraphFnp, graph: &Graph, num_samples: usize, seed: u64) -> Result<PredictiveOutput> {
    ensure!(num_samples >= 1, Argument, "num_samples must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<DrawNoise> = (0..num_samples)
        .map(|_| DrawNoise::sample(&mut rng, model.config.latent_dim, model.num_rationales()))
        .collect();
    predict_with_noise(model, graph, &draws)
}

fn row(v: &[f64]) -> Mat {
    Mat::from_shape_vec((1, v.len()), v.to_vec()).expect("row")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::encode;
    use crate::graph::generate_ba_motif_dataset;
    use crate::nn::{gradient_check, Gradients};
    use proptest::prelude::*;
    use rand::Rng;

    fn model() -> (GraphFnp, crate::graph::Dataset) {
        let ds = generate_ba_motif_dataset(4, (5, 7), 2).unwrap();
        let mut cfg = ModelConfig::for_dataset(&ds);
        cfg.hidden_dim = 8;
        cfg.latent_dim = 4;
        cfg.rationale_dim = 4;
        cfg.rationales_per_class = 2;
        (GraphFnp::new(cfg, 1).unwrap(), ds)
    }

    #[test]
    fn kernel_values() {
        assert_eq!(kernel(&[0.3, -1.0], &[0.3, -1.0], 2.0), 1.0);
        // exp(-5), evaluated independently.
        assert!((kernel(&[0.0, 0.0], &[3.0, 4.0], 1.0) - 0.006_737_946_999_085_467).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn kernel_symmetric_and_bounded(a in proptest::collection::vec(-5.0f64..5.0, 3), b in proptest::collection::vec(-5.0f64..5.0, 3), gamma in 0.01f64..5.0) {
            let k = kernel(&a, &b, gamma);
            prop_assert_eq!(k, kernel(&b, &a, gamma));
            prop_assert!(k > 0.0 && k <= 1.0);
            prop_assert_eq!(k == 1.0, a == b || gamma * a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() < 1e-16);
        }

        #[test]
        fn classify_on_simplex(z in proptest::collection::vec(-3.0f64..3.0, 4), u in proptest::collection::vec(-3.0f64..3.0, 4)) {
            let (m, _) = model();
            let p = classify(&m, &z, &u).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn hard_and_relaxed_sampling() {
        let kappa = Mat::from_elem((1, 1), 0.999_999);
        let s = sample_correlations(&kappa, CorrelationMode::Hard, &Mat::from_elem((1, 1), 0.99)).unwrap();
        assert_eq!(s.values[[0, 0]], 1.0);
        // logit(0.7) + log(0.7/0.3) = 2·ln(7/3) ≈ 1.69, so at τ = 0.01 the
        // sigmoid argument is ≈ 169.
        let r = relaxed_bernoulli(0.7, 0.3, 0.01);
        assert!((r - 1.0).abs() < 1e-3, "{r}");
        assert!(sample_correlations(&Mat::from_elem((1, 1), 0.0), CorrelationMode::Hard, &Mat::from_elem((1, 1), 0.5)).is_err());
        let relaxed = CorrelationMode::Relaxed { temperature: 0.5, straight_through: false };
        let v = sample_correlations(&Mat::from_elem((1, 1), 1.0), relaxed, &Mat::from_elem((1, 1), 0.5)).unwrap();
        assert!(v.values[[0, 0]] > 0.0 && v.values[[0, 0]] < 1.0);
    }

    #[test]
    fn relaxed_approaches_hard_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let k: f64 = rng.random_range(0.01..0.99);
            let u: f64 = rng.sample(Open01);
            if (u - k).abs() < 1e-3 {
                continue;
            }
            let hard = f64::from(u8::from(u < k));
            let gaps: Vec<f64> = [1.0, 0.1, 0.01].iter().map(|&t| (relaxed_bernoulli(k, u, t) - hard).abs()).collect();
            assert!(gaps[0] >= gaps[1] && gaps[1] >= gaps[2], "{gaps:?}");
        }
    }

    #[test]
    fn local_embedding_cases() {
        let (m, _) = model();
        let zs: Vec<Vec<f64>> = (0..4).map(|i| vec![0.1 * i as f64, -0.2, 0.3, 0.05 * i as f64]).collect();
        let empty = local_rationale_embedding(&m, &[0.0; 4], &zs).unwrap();
        assert!(empty.mean.iter().chain(&empty.log_variance).all(|x| x.to_bits() == 0));

        let proj = |z: &Vec<f64>| rationale_local(&m, z);
        let one = local_rationale_embedding(&m, &[0.0, 0.0, 1.0, 0.0], &zs).unwrap();
        assert_eq!(one, proj(&zs[2]));

        let two = local_rationale_embedding(&m, &[1.0, 0.0, 0.0, 1.0], &zs).unwrap();
        let (a, b) = (proj(&zs[0]), proj(&zs[3]));
        for i in 0..4 {
            assert!((two.mean[i] - (a.mean[i] + b.mean[i]) / 2.0).abs() < 1e-15);
        }
    }

    fn rationale_local(m: &GraphFnp, z: &[f64]) -> GaussianEmbedding {
        crate::rationale::rationale_local_embedding(m, &GaussianEmbedding { mean: z.to_vec(), log_variance: vec![0.0; z.len()] }).unwrap()
    }

    #[test]
    fn classifier_edge_cases() {
        let (mut m, _) = model();
        let z = [0.4, -0.1, 0.2, 0.9];
        let p = classify(&m, &z, &z).unwrap();
        let mut shifted = m.clone();
        let last = shifted.head.classifier.layers.last().unwrap().bias;
        shifted.params.value_mut(last).mapv_inplace(|b| b + 3.0);
        let q = classify(&shifted, &z, &z).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
        m.head.classifier.zero_output(&mut m.params);
        assert_eq!(classify(&m, &z, &z).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn posterior_shapes() {
        let (mut m, ds) = model();
        let (rep, _) = encode(&m, &ds.graphs[0]).unwrap();
        let q = variational_posterior(&m, &rep.pooled).unwrap();
        assert_eq!(q.dim(), 4);
        assert_eq!(q, variational_posterior(&m, &rep.pooled).unwrap());
        m.head.q_mean.zero(&mut m.params);
        m.head.q_log_variance.zero(&mut m.params);
        assert_eq!(variational_posterior(&m, &rep.pooled).unwrap(), GaussianEmbedding::standard(4));
    }

    #[test]
    fn frozen_prediction_composes() {
        let (m, ds) = model();
        let g = &ds.graphs[0];
        let mut noise = DrawNoise::zeros(4, 4);
        noise.uniform = vec![1.0; 4];
        let out = predict_with_noise(&m, g, &[noise]).unwrap();
        let (_, z) = encode(&m, g).unwrap();
        assert_eq!(out.mean_correlation.as_deref(), Some(&[0.0; 4][..]));
        assert_eq!(out.probs[0], classify(&m, &z.mean, &[0.0; 4]).unwrap());
    }

    #[test]
    fn predictive_output_contract() {
        let (m, ds) = model();
        let out = predict_distribution(&m, &ds.graphs[1], 8, 4).unwrap();
        assert_eq!(out.probs.len(), 8);
        for p in &out.probs {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(out.predicted_label, argmax(&out.mean_probs));
        assert_eq!(out.confidence, out.mean_probs[out.predicted_label]);
        assert_eq!(out, predict_distribution(&m, &ds.graphs[1], 8, 4).unwrap());
    }

    #[test]
    fn gradients_through_relaxed_correlations() {
        let (m, ds) = model();
        let uniform = vec![0.3, 0.6, 0.45, 0.8];
        let zr_noise = Mat::from_shape_fn((4, 4), |(i, j)| ((i + 2 * j) as f64 * 0.7).cos());
        let groups = [ParamGroup::ThetaE, ParamGroup::ThetaR, ParamGroup::ThetaCls];
        let loss = |store: &ParamStore| -> Result<(f64, Gradients)> {
            let mut tape = Tape::new(&groups);
            let enc = m.encoder.forward(&mut tape, store, &ds.graphs[0])?;
            let z = enc.embedding.sample(&mut tape, Mat::from_elem((1, 4), 0.2));
            let zr = m.rationales.forward(&mut tape, store).sample(&mut tape, zr_noise.clone());
            let mode = CorrelationMode::Relaxed { temperature: 0.7, straight_through: false };
            let corr = correlate(&mut tape, z, zr, 0.3, mode, false, &uniform);
            let local = m.head.local(&mut tape, store, corr.c, zr);
            let u = local.sample(&mut tape, Mat::from_elem((1, 4), -0.4));
            let logits = m.head.logits(&mut tape, store, z, u);
            let lp = tape.log_softmax(logits);
            let l = tape.pick_sum(lp, vec![1]);
            let l = tape.scale(l, -1.0);
            Ok((tape.scalar(l), tape.backward(l, store)))
        };
        let report = gradient_check(loss, &m.params, &groups, 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}
