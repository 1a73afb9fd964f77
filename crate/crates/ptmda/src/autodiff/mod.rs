//! Minimal reverse-mode automatic differentiation over flat buffers.
//!
//! The module provides exactly the primitives the training objectives need:
//! dense matmul, narrowly scoped broadcasting, pointwise maps, reductions,
//! row-level restructuring, a pairwise squared-distance kernel, and gradient
//! control (reversal, detach). Graphs are rebuilt every step; nothing here
//! is retained across iterations except parameter tensors and optimizer
//! state.

mod gradcheck;
mod sgd;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_against};
pub use sgd::{ParamRef, Sgd};
pub use tape::{GradMap, Tape, Var};
pub use tensor::{Real, Tensor};
