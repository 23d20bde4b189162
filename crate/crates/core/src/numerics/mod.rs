//! Minimal deterministic tensor library with reverse-mode gradients.

mod attention;
pub mod flops;
mod gradcheck;
mod graph;
pub mod io;
pub(crate) mod kernels;
mod params;
mod scalar;
mod tensor;

pub use attention::{init_attention, multi_head_attention, score_macs, AttentionVars};
pub use gradcheck::grad_check;
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use kernels::sigmoid;
pub use params::{Bound, Parameters};
pub use scalar::{cst, Scalar};
pub use tensor::Tensor;
