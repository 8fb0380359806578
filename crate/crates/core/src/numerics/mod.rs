//! Dense tensors, the differentiation tape, and the optimizer.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Activation, Graph, HeadLayout, NodeId};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::{cross_entropy, layernorm, matmul, softmax, transpose, Precision, Tensor};
