//! Dense tensors, reverse-mode autodiff and the linear-algebra kernels the
//! rest of the crate builds on.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod linalg;
mod real;
#[allow(clippy::module_inception)]
mod tensor;

pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use graph::{Graph, Var};
pub use linalg::{sym_eig, sym_matrix_function, SymEig};
pub use real::Real;
pub use tensor::Tensor;
