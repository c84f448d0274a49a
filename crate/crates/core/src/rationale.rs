//! The learnable per-class rationale bank and its Gaussian projections.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::encoder::{gaussian_heads, GaussianEmbedding, GaussianVar};
use crate::error::{ensure, Result};
use crate::model::{GraphFnp, ModelConfig};
use crate::nn::{Mat, Mlp, MlpSpec, ParamGroup, ParamId, ParamStore, Tape};

/// Free rationale vectors with a fixed class assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct RationaleBank {
    pub vectors: Mat,
    pub class_of: Vec<usize>,
    pub per_class_count: Vec<usize>,
}

/// `num_classes · per_class` vectors drawn from `0.1 · N(0, I)`, grouped by class.
pub fn init_bank(num_classes: usize, per_class: usize, dim: usize, seed: u64) -> Result<RationaleBank> {
    ensure!(num_classes >= 2, Argument, "need at least 2 classes, got {num_classes}");
    ensure!(per_class >= 1, Argument, "need at least one rationale per class");
    ensure!(dim >= 1, Argument, "rationale dimension must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = num_classes * per_class;
    let vectors = Mat::from_shape_fn((total, dim), |_| 0.1 * rng.sample::<f64, _>(StandardNormal));
    Ok(RationaleBank {
        vectors,
        class_of: (0..total).map(|i| i / per_class).collect(),
        per_class_count: vec![per_class; num_classes],
    })
}

#[derive(Clone, Debug)]
pub struct Rationales {
    pub vectors: ParamId,
    pub class_of: Vec<usize>,
    pub per_class_count: Vec<usize>,
    pub mean_head: Mlp,
    pub log_variance_head: Mlp,
}

impl Rationales {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, bank: RationaleBank, rng: &mut impl Rng) -> Result<Self> {
        let g = ParamGroup::ThetaR;
        let spec = MlpSpec::new(cfg.rationale_dim, cfg.hidden_dim, cfg.latent_dim, 2);
        Ok(Rationales {
            vectors: store.insert(g, "s", bank.vectors),
            class_of: bank.class_of,
            per_class_count: bank.per_class_count,
            mean_head: Mlp::new(store, g, "z_mean", spec, rng)?,
            log_variance_head: Mlp::new(store, g, "z_log_variance", spec, rng)?,
        })
    }

    /// All rationale Gaussians as `|R| × latent` rows.
    pub(crate) fn forward(&self, tape: &mut Tape, store: &ParamStore) -> GaussianVar {
        let s = tape.param(store, self.vectors);
        gaussian_heads(tape, store, &self.mean_head, &self.log_variance_head, s)
    }
}

pub fn rationale_embeddings(model: &GraphFnp) -> Vec<GaussianEmbedding> {
    let mut tape = Tape::default();
    let g = model.rationales.forward(&mut tape, &model.params);
    (0..model.num_rationales()).map(|i| GaussianEmbedding::from_rows(&tape, g, i)).collect()
}

/// Projects a rationale embedding's mean into the local-embedding space
/// with the same MLPs that summarize correlated rationales for a graph.
pub fn rationale_local_embedding(model: &GraphFnp, z_r: &GaussianEmbedding) -> Result<GaussianEmbedding> {
    ensure!(z_r.dim() == model.config.latent_dim, Shape, "rationale embedding dim {} != {}", z_r.dim(), model.config.latent_dim);
    let mut tape = Tape::default();
    let z = tape.row(&z_r.mean);
    let u = model.head.project(&mut tape, &model.params, z);
    Ok(GaussianEmbedding::from_tape(&tape, u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::generate_ba_motif_dataset;
    use crate::nn::{gradient_check, Gradients};

    fn model() -> GraphFnp {
        let ds = generate_ba_motif_dataset(4, (5, 7), 2).unwrap();
        let mut cfg = ModelConfig::for_dataset(&ds);
        cfg.hidden_dim = 8;
        cfg.latent_dim = 4;
        cfg.rationale_dim = 3;
        GraphFnp::new(cfg, 9).unwrap()
    }

    #[test]
    fn bank_layout() {
        let b = init_bank(2, 5, 4, 0).unwrap();
        assert_eq!(b.vectors.dim(), (10, 4));
        assert_eq!(b.class_of, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        let c = init_bank(3, 1, 4, 0).unwrap();
        assert_eq!(c.class_of, vec![0, 1, 2]);
        assert_eq!(init_bank(2, 5, 4, 0).unwrap(), b);
        assert!(init_bank(1, 5, 4, 0).is_err());
        assert!(init_bank(2, 0, 4, 0).is_err());
    }

    #[test]
    fn zero_heads_and_locality() {
        let mut m = model();
        let all = rationale_embeddings(&m);
        assert_eq!(all.len(), 10);

        m.params.value_mut(m.rationales.vectors)[[3, 1]] += 0.5;
        let moved = rationale_embeddings(&m);
        for i in 0..10 {
            assert_eq!(all[i] == moved[i], i != 3, "rationale {i}");
        }

        m.rationales.mean_head.zero(&mut m.params);
        m.rationales.log_variance_head.zero(&mut m.params);
        assert!(rationale_embeddings(&m).iter().all(|e| *e == GaussianEmbedding::standard(4)));
    }

    #[test]
    fn local_projection() {
        let mut m = model();
        let z = rationale_embeddings(&m)[0].clone();
        let u = rationale_local_embedding(&m, &z).unwrap();
        assert_eq!(u.dim(), 4);
        assert_eq!(u, rationale_local_embedding(&m, &z).unwrap());
        m.head.u_mean.zero(&mut m.params);
        m.head.u_log_variance.zero(&mut m.params);
        assert_eq!(rationale_local_embedding(&m, &z).unwrap(), GaussianEmbedding::standard(4));
    }

    #[test]
    fn gradients_wrt_vectors_and_heads() {
        let m = model();
        let noise = Mat::from_shape_fn((10, 4), |(i, j)| ((i * 4 + j) as f64 * 0.37).sin());
        let loss = |store: &ParamStore| -> Result<(f64, Gradients)> {
            let mut tape = Tape::new(&[ParamGroup::ThetaR]);
            let g = m.rationales.forward(&mut tape, store);
            let z = g.sample(&mut tape, noise.clone());
            let sq = tape.mul(z, z);
            let l = tape.sum_all(sq);
            Ok((tape.scalar(l), tape.backward(l, store)))
        };
        let report = gradient_check(loss, &m.params, &[ParamGroup::ThetaR], 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}
