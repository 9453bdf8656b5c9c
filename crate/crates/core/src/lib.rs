//! No-box adversarial attack toolkit: train tiny auto-encoding substitute
//! models on a handful of images, craft transferable adversarial examples on
//! them, and evaluate transfer against pluggable victim models.

pub mod attack;
pub mod classifier;
mod container;
pub mod data;
mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod rng;
pub mod toy;
pub mod training;

pub use error::{Error, Result};
