//! Dense tensors and reverse-mode differentiation.
//!
//! All arithmetic is `f64` and every reduction runs in a fixed order, so a
//! graph evaluated twice produces bit-identical values and gradients.

mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod tensor;

pub use gradcheck::{audit_primitives, finite_diff_check, GradCheckOptions, PrimitiveAudit};
pub use graph::{Gradients, Graph, ParamId, Var};
pub use kernels::timestep_embedding;
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use tensor::Tensor;
