//! Dense 2-D tensors with tape-based reverse-mode differentiation.

pub mod checkpoint;
pub mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use optim::{clip_grad_norm, Adam};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
