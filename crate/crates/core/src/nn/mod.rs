//! Minimal CPU tensor and layer toolkit with hand-written backward passes.
//!
//! Layers cache whatever their backward pass needs during `forward`; `infer`
//! is the cache-free, batch-norm-running-statistics path used at inference.

mod conv;
mod element;
pub mod init;
pub mod layers;
mod optim;
mod param;
mod sequential;
mod tensor;

pub use conv::Conv2d;
pub use element::Element;
pub use layers::{sigmoid, Activation, ActivationLayer, BatchNorm2d, Dropout, MaxPool2};
pub use optim::{Optimizer, OptimizerKind};
pub use param::{checksum, Buffer, Param};
pub use sequential::{Op, Pass, Sequential};
pub use tensor::Tensor;

/// Whether repeated runs with equal seeds produce bit-identical results.
/// Everything here is single-threaded with a fixed reduction order.
pub const DETERMINISTIC_BACKEND: bool = true;
