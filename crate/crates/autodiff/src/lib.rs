//! Reverse-mode automatic differentiation over dense `f64` matrices, with
//! the Adam optimiser, finite-difference gradient checks and a flat binary
//! checkpoint format.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod param;
pub mod registry;
pub mod tape;
pub mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, grad_check_module, grad_check_module_strided, GradCheck};
pub use layers::Linear;
pub use optim::{clip_grad_norm, Adam};
pub use param::{Module, Param, ParamId};
pub use tape::{concat_cols, concat_rows, sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;
