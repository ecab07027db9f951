//! Dense `f64` matrices, a reverse-mode tape over them, and a
//! central-difference gradient oracle.

mod gradcheck;
mod mat;
mod tape;

pub use gradcheck::{finite_diff_grad, relative_error};
pub use mat::{dot, logsumexp, softmax_in_place, Mat};
pub use tape::{CustomBackward, Gradients, NodeId, Tape};
