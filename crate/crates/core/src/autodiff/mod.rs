//! Dense-tensor reverse-mode differentiation covering the operations the
//! attention model needs.

pub mod gradcheck;
mod graph;
mod params;


pub use graph::{kernels, Activation, Bound, Graph, Var, MIN_NORM};
pub use params::{glorot_uniform, Gradients, ParamId, ParamStore, Parameter};
