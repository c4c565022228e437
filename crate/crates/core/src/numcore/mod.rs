//! Dense tensors, reverse-mode autodiff and seeded initialization.

mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use rng::{randn, RngState};
pub use tape::{Tape, Var};
pub use tensor::{matmul, softmax_rows, Tensor};
