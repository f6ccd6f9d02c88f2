//! Desk-scale multi-scale residual fusion segmentation network.
//!
//! A self-contained f64 tensor/autodiff engine (`tensor`, `tape`,
//! `kernels`), the network building blocks (`blocks`, `dsdf`, `subnet`,
//! `network`), losses and metrics (`loss`, `metrics`), data handling
//! (`data`), and the training stack (`optim`, `config`, `trainer`).

pub mod blocks;
pub mod config;
pub mod data;
pub mod dsdf;
pub mod error;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod params;
pub mod runtime;
pub mod subnet;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
