//! A small reverse-mode automatic differentiation engine over dense `f64`
//! tensors, with the layers the pipeline's models are built from.
//!
//! A [`Graph`] records operations as they execute. Parameters live in a
//! [`ParamStore`] that the graph borrows, so building a graph never copies
//! weights. [`Graph::backward`] returns [`Gradients`] indexed by parameter.

mod gemm;
mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{check_gradients, GradCheck};
pub use graph::{Graph, Gradients, Var};
pub use layers::{
    scaled_dot_product_attention, BatchNorm2d, BiGru, Conv2d, Gru, Linear, Lstm,
    MultiHeadAttention,
};
pub use graph::{BnUpdate, PROB_FLOOR};
pub use optim::{apply_bn_updates, clip_global_norm, AdamW};
pub use params::{Init, ParamEntry, ParamId, ParamStore};
pub use tensor::Tensor;
