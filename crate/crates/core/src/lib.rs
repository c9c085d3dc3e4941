//! Latent backdoor attacks on transfer-learned CNNs.

pub mod attack;
pub mod autodiff;
pub mod config;
pub mod container;
pub mod data;
pub mod defense;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod reproduce;
pub mod tensor;
pub mod train;
pub mod transfer;
pub mod trigger;

pub use error::{Error, ErrorFamily, Result};
pub use tensor::Tensor;
