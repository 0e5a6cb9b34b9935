//! A compact CPU neural-network engine.
//!
//! Activations are feature-major `[channels, batch, height, width]`
//! tensors, layers have hand-written forward and backward kernels, and
//! everything is generic over `f32` (training) and `f64` (gradient checks).

pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod sequential;
pub mod tensor;

pub use optim::Adam;
pub use params::{ParamId, ParamSet};
pub use scalar::Scalar;
pub use sequential::{Layer, Sequential, Trace, LRELU_GAIN, LRELU_SLOPE};
pub use tensor::Tensor;
