//! Dense tensors, a reverse-mode tape and a finite-difference checker,
//! generic over the floating-point element type.

mod check;
mod tape;
mod tensor;

pub use check::{analytic_gradient, eval_scalar, finite_diff_check, finite_diff_check_coords};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

