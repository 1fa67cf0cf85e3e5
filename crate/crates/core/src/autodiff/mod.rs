//! A small reverse-mode automatic differentiation tape over dense 2-D tensors.
//!
//! Every forward pass records its operations on a [`Tape`]; [`Tape::backward`]
//! then walks the tape in reverse and returns gradients for every variable
//! that requires them. The heavier operations (attention, layer norm, 6D
//! rotations, rigid transforms, trajectory integration) are fused with
//! hand-written backward rules.

mod attention;
mod geom_ops;
mod optim;
mod tape;
mod tensor;

pub use attention::AttentionSpec;
pub use optim::{clip_grad_norm, AdamW, AdamWConfig, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
