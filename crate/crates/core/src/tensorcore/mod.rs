//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

pub mod adam;
mod conv_direct;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use kernels::{AttentionShape, IGNORE_INDEX};
pub use params::{ParamStore, ParamVars};
pub use tensor::{gemm, Scalar, Tensor};
