//! Inter-frame local attention for video feature propagation, a slow/fast
//! multi-task network built on it, adversarial feature mimicking, and
//! static FLOP accounting. Everything runs on a small in-crate
//! reverse-mode differentiation engine over `f64` tensors.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod flops;
pub mod network;
pub mod params;
pub mod reference;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{ConvParams, Tensor};
