//! Differentiable tensor substrate shared by every model in the crate.

mod gradcheck;
mod optim;
mod params;
mod real;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheck};
pub use optim::{Optimizer, OptimizerKind};
pub use params::ParamSet;
pub use real::Real;
pub use rng::{RngState, SeedRng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
