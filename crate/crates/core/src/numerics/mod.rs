//! Dense f64 tensors, the primitive kernels the model is built from, a
//! tape-style reverse-mode differentiator and a finite-difference checker.

pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport, FD_STEP};
pub use graph::{Gradients, Graph, Var};
pub use ops::{layer_norm, matmul, softmax};
pub use tensor::Tensor;
