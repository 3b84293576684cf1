//! Dense tensors, reverse-mode autodiff, AdamW and gradient checking.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, Objective, ParamCheck};
pub use graph::{BackwardFault, Gradients, Graph, Var, NEG_LARGE};
pub use optim::{adamw_step, clip_global_norm, AdamWConfig, OptimState};
pub use params::{BoundParams, ParamStore};
pub use rng::SeedStreams;
pub use tensor::Tensor;

pub(crate) use graph::gelu_fwd;
pub(crate) use tensor::gemm_nn;
