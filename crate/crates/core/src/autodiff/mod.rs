//! Dense matrices and a reverse-mode differentiation tape.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{analytic_gradient, central_difference, grad_check};
pub use matrix::{dot, l2_norm, row_softmax, Matrix};
pub use tape::{Gradients, NodeId, Tape};

pub(crate) use matrix::log_softmax_in_place;
pub(crate) use tape::argmin_argmax;
