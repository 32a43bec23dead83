//! Differentiable numeric kernels, a reverse-mode tape and the Adam optimizer.

mod adam;
mod gradcheck;
mod graph;
pub mod ops;
mod params;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, TraceEntry, Var, NO_SOURCE};
pub use params::{xavier_uniform, ParameterStore};
pub use tensor::Tensor;
