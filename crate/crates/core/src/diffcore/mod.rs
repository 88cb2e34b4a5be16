//! Tensors, reverse-mode differentiation and the finite-difference oracle.

pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod param;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, FdReport};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{set_corrupted_backward, Gradients, OpKind, Tape, TapeStats, Var};
pub use tensor::Tensor;
