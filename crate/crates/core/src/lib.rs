//! Differentiable Gaussian splatting with every Gaussian anchored to a vertex
//! of a skinned parametric body.

pub mod bench;
pub mod body_model;
pub mod config;
pub mod dataio;
pub mod error;
pub mod fitting;
pub mod gaussian;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod plots;
pub mod ply;
pub mod predictor;
pub mod raster;
pub mod rotation;
pub mod ssim;

pub use error::{Error, Result};
