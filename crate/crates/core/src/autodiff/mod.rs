//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod graph;
pub(crate) mod kernels;
mod params;

pub use graph::{Gradients, Graph, Unary, Var};
pub use params::{ParamEntry, ParamId, ParamStore};
