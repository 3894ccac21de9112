//! Minimal dense layers with hand-written backward passes.
//!
//! Networks are generic over [`Scalar`] so the same architecture can be trained in
//! `f32` and gradient-checked in `f64`.

mod conv;
mod layer;
mod optim;
mod scalar;
mod sequential;
mod tensor;

pub use layer::{Init, Layer, LayerSpec, Mode, Param};
pub use optim::{Adam, AdamConfig};
pub use scalar::Scalar;
pub use sequential::{Grads, Sequential, Tape};
pub use tensor::Tensor;
