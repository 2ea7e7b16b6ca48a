//! Small dense-tensor autodiff: a define-by-run tape over 64-bit matrices,
//! named parameters with a checkpoint format, Adam, and a finite-difference
//! gradient checker.

mod adam;
mod gradcheck;
mod nn;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use nn::{Activation, Linear, Mlp};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{CompositeSpec, Grads, Tape, Var};
pub use tensor::Tensor;
