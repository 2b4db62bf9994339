//! Dense tensors with tape-based reverse-mode differentiation.

mod attention;
mod gradcheck;
pub mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use attention::{attention_values, KeyLists};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use scalar::Scalar;
pub use tape::{masked_softmax_values, CustomOp, FlopCounts, Gradients, Tape, Var};
pub use tensor::Tensor;
