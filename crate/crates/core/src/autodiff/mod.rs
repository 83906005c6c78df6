//! Dense matrices and a reverse-mode gradient tape.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, REL_ERR_FLOOR};
pub use matrix::{argmax, cosine_distance, dot, norm, Matrix, NORM_FLOOR};
pub use tape::{Gradients, Tape, Var};

