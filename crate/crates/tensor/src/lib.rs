//! Dense tensor arithmetic with tape-based reverse-mode differentiation.

mod error;
mod float;
pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use float::{gemm, DType, Float, MatView};
pub use kernels::{gelu, layer_norm, matmul, softmax, LAYER_NORM_EPS};
pub use tape::{AttentionSpec, Tape, Var};
pub use tensor::Tensor;
