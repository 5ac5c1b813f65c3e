//! Minimal reverse-mode differentiation, optimizers and checkpoints.

pub mod checkpoint;
mod gemm;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{sigmoid, Gradients, Graph, Var, PROB_EPS};
pub use optim::{adam_step, clip_grad_norm, onecycle_lr, AdamConfig, OneCycle, OptimState};
pub use params::{kaiming_uniform, ParamStore, Parameter};
pub use tensor::Tensor;
