//! Dense 2-D tensors and a tape-based reverse-mode differentiator.

mod graph;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::{cosine, dot, norm, Tensor};

/// Norm clamp used by every cosine similarity in the crate.
pub const COSINE_EPS: f64 = 1e-8;
