//! Dense tensors with reverse-mode differentiation over the handful of ops the
//! graph network needs.

mod check;
mod graph;
mod params;
mod tensor;

pub use check::{finite_difference_check, GradCheck};
pub use graph::{Gradients, Graph, NormStats, Var, NORM_EPS};
pub use params::{adam_update, AdamConfig, AdamState, ParamSet, BUFFER_SUFFIXES};
pub use tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

#[cfg(test)]
mod tests;
