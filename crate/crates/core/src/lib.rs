//! GraphFNP: graph classification with calibrated predictive distributions
//! conditioned on a learned bank of per-class rationale embeddings, plus an
//! autoregressive decoder that turns rationales back into graph structures.

pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fnp;
pub mod graph;
pub mod model;
pub mod nn;
pub mod rationale;
pub mod rng;
pub mod trainer;

pub use decoder::{bfs_sequence, decode_rationale, Decoder, GenerationSequence, PartialGraphState, TieBreak, Vocab};
pub use encoder::{encode, GaussianEmbedding, GraphRepresentation};
pub use error::{Error, Result};
pub use eval::{auroc, ece, evaluate, explain, rationale_f1, temperature_scale, CalibrationReport, Metrics, RF1Report};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use fnp::{classify, kernel, predict_distribution, sample_correlations, CorrelationMode, PredictiveOutput};
pub use graph::{Dataset, Edge, Graph, SplitSpec};
pub use model::{Ablation, Ablations, GraphFnp, ModelConfig};
pub use rationale::{rationale_embeddings, RationaleBank};
pub use trainer::{train, LossReport, TrainConfig};
