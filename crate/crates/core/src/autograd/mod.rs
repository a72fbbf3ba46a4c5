//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.

mod gemm;
mod gradcheck;
mod tape;

pub use gradcheck::{compare_gradient, grad_check, numerical_gradient, relative_error};
pub use tape::{Gradients, Tape, Var};

pub(crate) use tape::roll2d_data;
