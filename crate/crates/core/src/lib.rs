//! Deformable 3D Gaussian splatting driven by fused RGB, event and depth
//! supervision.
//!
//! The crate is organised bottom-up:
//!
//! * [`scene`]: canonical Gaussians, cameras and the projection to screen space.
//! * [`raster`]: tile-parallel front-to-back alpha blending with an analytic
//!   backward pass.
//! * [`deform`]: six-plane spatio-temporal feature grids and the decoder that
//!   maps `(mu, t)` to per-Gaussian offsets.
//! * [`events`]: event windows, neutralization masks and the event loss.
//! * [`simulator`]: threshold-crossing event generation from dense frames.
//! * [`trainer`]: losses, Adam, density control and the two-phase schedule.
//! * [`dataset`]: on-disk formats, the analytic scene generator and checkpoints.
//! * [`metrics`]: PSNR, DRMS and held-out evaluation.

pub mod dataset;
pub mod deform;
mod error;
pub mod events;
pub mod image;
pub mod metrics;
pub mod optim;
pub mod raster;
pub mod scene;
pub mod simulator;
#[cfg(test)]
mod testing;
pub mod trainer;

pub use error::{Error, Result};
pub use image::{GrayImage, Image, RgbImage};
