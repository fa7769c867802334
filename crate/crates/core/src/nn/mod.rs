//! Dense tensors, the gradient tape, parameters, and numerical checks.

pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_params, relative_error, ParamCheck};
pub use params::{GradBuffer, Graph, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{argmax, Tensor};
