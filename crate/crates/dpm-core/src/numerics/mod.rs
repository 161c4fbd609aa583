//! Reverse-mode autodiff engine: tensors, ops, optimizers.

mod ops;
mod optim;
mod tensor;

pub use optim::{Optimizer, OptimizerKind};
pub use tensor::{Scalar, Tensor};
