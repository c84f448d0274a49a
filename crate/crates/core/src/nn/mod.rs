//! Differentiable building blocks shared by the encoder, head and decoder.

mod gradcheck;
mod layers;
mod optim;
mod params;
mod tape;

pub use gradcheck::{gradient_check, gradient_floor, relative_error, GradientCheck};
pub use layers::{aggregate_mean, gcn_layer, mlp_forward, normalized_adjacency, Activation, GcnLayer, Linear, Mlp, MlpSpec};
pub use optim::Adam;
pub use params::{Gradients, ParamGroup, ParamId, ParamStore};
pub use tape::{sigmoid, Mat, SparseMatrix, Tape, Var};
