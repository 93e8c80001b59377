//! Minimal CPU neural-network engine: tensors, conv / transposed-conv /
//! pooling / fully connected layers with explicit backward passes, Adam, and
//! data-parallel mini-batch gradients.

pub mod error;
pub mod layers;
pub mod loss;
pub mod network;
pub mod optim;
pub mod parallel;
pub mod real;
pub mod tensor;
pub mod train;

pub use error::{NnError, Result};
pub use layers::{Conv2d, ConvTranspose2d, Linear, MaxPool2d};
pub use network::{Layer, Params, Sequential, Trace};
pub use optim::{Adam, AdamConfig};
pub use parallel::Parallelism;
pub use real::Real;
pub use tensor::Tensor;
