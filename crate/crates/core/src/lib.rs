//! Discrete-diffusion contour refinement.
//!
//! A categorical contour map is denoised by an absorbing-state diffusion
//! model conditioned on an image and a coarse guide mask, then thinned and
//! closed into a single boundary curve.

pub mod contour_ops;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use grid::{BinaryImage, CategoricalGrid, ConditionStack, GrayImage};
