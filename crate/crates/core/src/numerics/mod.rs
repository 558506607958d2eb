//! Dense `f64` tensors, reverse-mode autodiff and the MAC meter.

pub mod kernels;
pub mod meter;
mod ops;
mod tape;
mod tensor;
mod tracer;

pub use ops::{gelu, gelu_grad, Ops};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use tracer::ShapeTracer;
