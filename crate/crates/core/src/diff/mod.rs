//! Minimal dense tensors with reverse-mode automatic differentiation.

mod check;
pub mod opcheck;
mod params;
mod tape;
mod tensor;

pub use check::{finite_diff_check, GradCheckReport, ABS_FLOOR};
pub use params::{BoundParams, ParamSet};
pub use tape::{CustomOp, DiffError, Gradients, Index, Result, Tape, Var};
pub use tensor::Tensor;
