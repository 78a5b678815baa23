//! Single-sample image-fusion upsampling of fluorescence lifetime images.
//!
//! A sparse low-resolution lifetime image is fused with a co-registered
//! high-resolution intensity image. Two priors are built from the sample
//! itself (a windowed intensity-to-lifetime regression and a small patch
//! regressor trained from scratch), then combined with the measurements in a
//! total-variation regularized inverse problem solved by ADMM.

pub mod error;
pub mod global_prior;
pub mod io;
pub mod lifetime;
pub mod local_prior;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod render;
pub mod sampling;
pub mod solver;
pub mod types;

pub use error::{Error, Result};
pub use types::{integrate_time, Datacube, Plane, Role, SamplingMap};
