//! The assembled model: configuration, parameter store and the layer
//! handles of every component.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::Decoder;
use crate::encoder::Encoder;
use crate::error::{ensure, Error, Result};
use crate::fnp::FnpHead;
use crate::graph::Dataset;
use crate::nn::{ParamGroup, ParamStore};
use crate::rationale::{init_bank, RationaleBank, Rationales};

/// Component switches used for ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Ablation {
    /// Zero vector in place of the graph embedding at the classifier input.
    #[serde(rename = "no_zD")]
    NoGraphEmbedding,
    /// Raw kernel weights in place of sampled correlations.
    #[serde(rename = "no_C")]
    NoCorrelationSampling,
    /// No rationale path at all: a plain GNN classifier on the graph embedding.
    #[serde(rename = "no_zR")]
    NoRationales,
    /// One joint loss updating every group at each step.
    #[serde(rename = "no_EM")]
    NoAlternation,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::NoGraphEmbedding,
        Ablation::NoCorrelationSampling,
        Ablation::NoRationales,
        Ablation::NoAlternation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::NoGraphEmbedding => "no_zD",
            Ablation::NoCorrelationSampling => "no_C",
            Ablation::NoRationales => "no_zR",
            Ablation::NoAlternation => "no_EM",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Argument(format!("unknown ablation {s:?} (expected one of no_zD, no_C, no_zR, no_EM)")))
    }
}

pub type Ablations = BTreeSet<Ablation>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub num_node_types: usize,
    pub num_edge_types: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub gcn_layers: usize,
    pub rationales_per_class: usize,
    pub rationale_dim: usize,
    pub decoder_hidden_dim: usize,
    pub decoder_layers: usize,
    pub gamma: f64,
    #[serde(default)]
    pub ablation: Ablations,
}

impl ModelConfig {
    /// Desk-scale defaults sized for a dataset.
    pub fn for_dataset(ds: &Dataset) -> Self {
        ModelConfig {
            feature_dim: ds.feature_dim,
            num_classes: ds.num_classes,
            num_node_types: ds.num_node_types,
            num_edge_types: ds.num_edge_types,
            latent_dim: 32,
            hidden_dim: 64,
            gcn_layers: 3,
            rationales_per_class: 5,
            rationale_dim: 32,
            decoder_hidden_dim: 32,
            decoder_layers: 2,
            gamma: 1.0,
            ablation: Ablations::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_classes >= 2, Argument, "num_classes must be >= 2");
        ensure!(self.rationales_per_class >= 1, Argument, "rationales_per_class must be >= 1");
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("num_node_types", self.num_node_types),
            ("num_edge_types", self.num_edge_types),
            ("latent_dim", self.latent_dim),
            ("hidden_dim", self.hidden_dim),
            ("gcn_layers", self.gcn_layers),
            ("rationale_dim", self.rationale_dim),
            ("decoder_hidden_dim", self.decoder_hidden_dim),
            ("decoder_layers", self.decoder_layers),
        ] {
            ensure!(v >= 1, Argument, "{name} must be >= 1");
        }
        ensure!(self.gamma > 0.0 && self.gamma.is_finite(), Argument, "gamma must be positive");
        Ok(())
    }

    pub fn has(&self, a: Ablation) -> bool {
        self.ablation.contains(&a)
    }

    pub fn uses_rationales(&self) -> bool {
        !self.has(Ablation::NoRationales)
    }
}

/// Parameters plus the handles that give them structure.
#[derive(Clone, Debug)]
pub struct GraphFnp {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub rationales: Rationales,
    pub head: FnpHead,
    pub decoder: Decoder,
}

impl GraphFnp {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let encoder = Encoder::new(&mut params, &config, &mut rng)?;
        let bank = init_bank(config.num_classes, config.rationales_per_class, config.rationale_dim, seed.wrapping_add(0x5eed))?;
        let rationales = Rationales::new(&mut params, &config, bank, &mut rng)?;
        let head = FnpHead::new(&mut params, &config, &mut rng)?;
        let decoder = Decoder::new(&mut params, &config, &mut rng)?;
        Ok(GraphFnp {
            config,
            params,
            encoder,
            rationales,
            head,
            decoder,
        })
    }

    pub fn num_rationales(&self) -> usize {
        self.rationales.class_of.len()
    }

    /// Current rationale vectors and class assignment.
    pub fn bank(&self) -> RationaleBank {
        RationaleBank {
            vectors: self.params.value(self.rationales.vectors).clone(),
            class_of: self.rationales.class_of.clone(),
            per_class_count: self.rationales.per_class_count.clone(),
        }
    }

    pub fn require_rationales(&self) -> Result<()> {
        if self.config.uses_rationales() {
            Ok(())
        } else {
            Err(Error::Unsupported("rationales disabled (no_zR ablation)".into()))
        }
    }

    pub fn groups(&self) -> &'static [ParamGroup] {
        &ParamGroup::ALL
    }
}
