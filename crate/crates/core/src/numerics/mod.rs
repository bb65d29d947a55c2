//! Dense tensors, the autodiff graph, Adam, and finite-difference checking.

mod adam;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, finite_diff_check_extrapolated, GradCheckReport};
pub use graph::{Gradients, Graph, Target, Var, LN_EPS, LN_ZERO_VAR, PROB_EPS};
pub use params::ParamStore;
pub use tensor::Tensor;
