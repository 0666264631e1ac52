//! Fully invertible classifiers, the independence cross-entropy objective and
//! invariance-based (metameric) attacks, on a small f64 autodiff engine.

pub mod attacks;
pub mod bijective;
pub mod datagen;
pub mod error;
pub mod objectives;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Gradients, Optimizer, OptimizerKind, Parameter, Tape, Tensor, Var};
