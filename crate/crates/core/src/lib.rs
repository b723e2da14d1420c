//! Joint differentiable architecture search and spatio-temporal compression
//! for spiking neural networks.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); searches,
//! checkpoints and the acceptance suite run in `f64`, exposed through the
//! `*64` aliases below.

pub mod arch;
pub mod autograd;
pub mod checkpoint;
pub mod compression;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod objectives;
pub mod optim;
pub mod scalar;
pub mod spiking;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use error::{Result, SnasError};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type Network64 = arch::Network<f64>;
pub type Network32 = arch::Network<f32>;
pub type Trainer64 = train::Trainer<f64>;
