//! Conditional denoising diffusion for retrieving 0.47, 0.65 and 0.825 um
//! reflectance from thermal-infrared brightness temperatures, land cover
//! and viewing geometry.
//!
//! The pipeline runs entirely on CPU: [`synth`] renders paired scenes,
//! [`train`] fits the [`denoiser`] UNet, [`ensemble`] draws members with
//! the [`diffusion`] sampler, [`metrics`] scores them, and [`dnb`] turns a
//! retrieval into a lunar-band equivalent for comparison with night-time
//! radiance. [`commands`] and [`experiment`] wire the stages to files.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod dnb;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod metrics;
pub mod nn;
pub mod rgb;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
