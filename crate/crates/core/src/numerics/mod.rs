//! Dense tensors, the gradient tape, and the layers built on them.

mod gradcheck;
mod graph;
mod layers;
mod params;
mod real;
pub mod rng;
mod tensor;

pub use gradcheck::{check_graph, check_store, grad_check, GradCheckOptions, GradReport};
pub use graph::{gelu_grad_scalar, gelu_scalar, Gradients, Graph, Var};
pub use layers::{
    dropout, softmax_vec, AttentionOutput, AttentionParams, Dropout, LayerNorm, Linear, MlpBlock,
    LN_EPS,
};
pub use params::{digest_named, ParamGrads, ParamId, ParamStore, StoreKind};
pub use real::Real;
pub use tensor::Tensor2D;
