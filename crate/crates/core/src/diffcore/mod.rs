//! Reverse-mode differentiable core: tensors, the tape, dense kernels and the
//! finite-difference checker.

pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradReport, ParamReport};
pub use kernels::Exec;
pub use tape::{Attrs, BnMode, OpId, Tape, Var};
pub use tensor::{Real, Tensor};
