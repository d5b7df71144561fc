//! Deterministic adversarial-training engine: single-step adversarial
//! training accelerated by sampling stochastic-depth subnetworks, with
//! baseline trainers, robustness evaluation, and a generalization-bound
//! diagnostic calculator.

pub mod attack;
pub mod autodiff;
pub mod bound;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod io;
pub mod kernels;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
