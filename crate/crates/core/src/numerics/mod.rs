//! Minimal tensor library with reverse-mode automatic differentiation.

pub mod container;
pub mod gradcheck;
mod kernels;
pub mod tape;
pub mod tensor;

pub use tape::{Gradients, PoolKind, Tape, Var};
pub use tensor::Tensor;
