//! Denoising Hamiltonian networks on pendulum systems.

pub mod baselines;
pub mod denoise;
pub mod error;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod physics;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
