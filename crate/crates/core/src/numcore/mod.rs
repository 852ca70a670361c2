//! Numerical substrate: tensors, reverse-mode autodiff, networks, Adam,
//! low-rank adapters and checkpoints.

pub mod adam;
pub mod binio;
pub mod checkpoint;
pub mod lora;
pub mod nn;
mod scalar;
pub mod tape;
mod tensor;

pub use adam::AdamState;
pub use checkpoint::Checkpoint;
pub use lora::LoraAdapter;
pub use nn::{time_embedding, Activation, Linear, Mlp, MlpConfig, Trainable};
pub use scalar::Scalar;
pub use tape::{stop_gradient, Grads, Param, ParamId, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod gradcheck_tests;
