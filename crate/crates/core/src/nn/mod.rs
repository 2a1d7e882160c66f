//! Minimal CPU network stack: NCHW tensors, layers with hand-written
//! backward passes, Adam, and flat weight blobs.

pub mod io;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod tensor;

pub use layers::{
    sigmoid, BatchNorm2d, Conv2d, ConvGeometry, GlobalAvgPool, Layer, Linear, MaxPool2d, Param, Relu, Sigmoid,
    Upsample2x,
};
pub use model::{Residual, Sequential};
pub use optim::Adam;
pub use tensor::Tensor;

#[cfg(test)]
mod gradcheck;
