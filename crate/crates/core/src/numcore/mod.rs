//! Dense tensors, forward kernels and tape-based reverse-mode differentiation.

mod graph;
mod scalar;
mod tensor;

pub use graph::{AttentionMask, Gradients, Graph, Var};
pub use scalar::{mac_count, reset_mac_count, MatView, Scalar};
pub use tensor::{cross_entropy, gelu, layer_normalize, matmul, matmul_ex, softmax, Tensor};
