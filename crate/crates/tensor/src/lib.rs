//! Dense `f64` tensors, a reverse-mode tape over them, and a central
//! finite-difference oracle for checking gradients.

pub mod error;
pub mod fd;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use fd::{finite_diff_at, finite_diff_gradient, max_rel_error, Step};
pub use tape::{gelu, gelu_deriv, sigmoid, softmax, DualValue, Gradients, Tape, Var};
pub use tensor::{argsort, broadcast_shape, Tensor};
