//! Dense 2-D tensors and the deterministic generator used everywhere else.

mod rng;
mod tensor;

pub use rng::Rng;
pub use tensor::{stable_ln, Tensor2D};
