//! Dense arrays, a recording tape for reverse-mode gradients, and SGD.

mod array;
mod gradcheck;
mod optim;
mod tape;

pub use array::{dot, l2_norm, normalize_in_place, sq_dist, DenseArray};
pub use gradcheck::{check_gradients, GradientCheck};
pub use optim::{sgd_step, Sgd};
pub use tape::{Gradients, Parameter, Tape, Var};
