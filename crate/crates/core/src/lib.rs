//! Ray-traced SAR image simulation over per-facet scattering feature
//! parameters, and a black-box finite-difference attack that perturbs those
//! parameters to fool an image classifier.

pub mod attack;
pub mod classifier;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod imaging;
pub mod raytracer;
pub mod render;
pub mod scene;
pub mod targets;

pub use error::{Error, Result};
