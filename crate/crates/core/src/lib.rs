//! Deterministic federated-learning simulation: strategies, non-IID data,
//! diffusion-based augmentation and exact cost accounting.

pub mod bench;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod federation;
pub mod model;
pub mod rng;
pub mod strategies;
pub mod tensor;

pub use error::{Error, Result};
