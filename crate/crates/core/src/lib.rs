//! Adaptive, differentiable Gaussian smoothing of 3D volumes.
//!
//! A small parameters network estimates the noise in each volume from the mean
//! absolute response of a fixed Laplacian kernel and maps it to a Gaussian
//! width `sigma_f`. The main network builds the truncated Gaussian filter for
//! that width, smooths the volume with it and feeds the result to a
//! batch-standardized logistic classifier. Every stage has an analytic
//! backward pass, so the smoothing width is trained jointly with the
//! classifier.
//!
//! The runnable programs under `examples/` walk through each capability.

pub mod classifier;
pub mod cli;
pub mod config;
pub mod conv;
pub mod error;
pub mod filter;
pub mod io;
pub mod manifest;
pub mod params_net;
pub mod phantom;
pub mod pipeline;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use filter::{build_filter, GaussianFilter};
pub use volume::{Dims, Volume};
