//! Minimal dense-tensor numerical core: recorded forward computation,
//! exact reverse-mode gradients, finite-difference verification, and a
//! byte-stable checkpoint format.

pub mod checkpoint;
mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, LossFn};
pub use graph::{Graph, NodeId, MASKED_SCORE};
pub use tensor::{accumulate_grads, GradientMap, ParameterSet, Tensor};
