//! Diffusion models for control with reward alignment.
//!
//! The numerical core ([`numcore`], [`diffusion`]) is generic over the
//! scalar type; the control, value and alignment layers run in `f64`.

pub mod align;
pub mod cascade;
pub mod diffusion;
pub mod dmc;
pub mod envs;
pub mod error;
pub mod numcore;
pub mod pipeline;
pub mod qvalue;

pub use error::{Error, Result};

pub type Tensor64 = numcore::Tensor<f64>;
pub type Tensor32 = numcore::Tensor<f32>;
pub type Mlp64 = numcore::Mlp<f64>;
pub type Mlp32 = numcore::Mlp<f32>;
pub type DiffusionModel64 = diffusion::DiffusionModel<f64>;
pub type DiffusionModel32 = diffusion::DiffusionModel<f32>;
