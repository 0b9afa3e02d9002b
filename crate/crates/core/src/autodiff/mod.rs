//! Reverse-mode differentiation over dense `f64` matrices.

mod gradcheck;
pub mod linalg;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheck};
pub use linalg::Jitter;
pub use optim::{Bound, GradMap, ParameterStore};
pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::Tensor;
