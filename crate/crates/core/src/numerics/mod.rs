//! Dense tensors, a reverse-mode tape, and the RMSProp optimizer.

pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{RmsProp, RmsPropConfig};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tape::{Tape, Var, MASK_FILL};
pub use tensor::Tensor;

#[cfg(test)]
mod gradient_tests;
