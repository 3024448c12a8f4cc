//! Spectral CT simulation and material decomposition.
//!
//! The library covers the full desk-scale pipeline:
//! ground-truth phantom synthesis ([`phantoms`]), line-integral projection
//! and FBP ([`projector`], [`fbp`]), a polyenergetic dual-kVp / dual-layer
//! measurement model ([`spectral`]), DDPM machinery with an analytic
//! Gaussian oracle and a trainable convolutional denoiser ([`diffusion`],
//! [`nn`]), four decomposition algorithms ([`decomposers`]), and image
//! quality / uncertainty metrics ([`metrics`]).

pub mod error;
pub mod geometry;
pub mod image;
pub mod io;
pub mod phantoms;
pub mod projector;
pub mod fbp;
pub mod spectral;
pub mod diffusion;
pub mod nn;
pub mod measurement;
pub mod decomposers;
pub mod metrics;

pub use error::{CoreError, Result};
pub use geometry::{BeamModel, Geometry};
pub use image::{AttenuationImage, ImagePlane, MaterialImage, N_MATERIALS};
