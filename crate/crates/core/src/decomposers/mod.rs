//! Material decomposition algorithms: image-domain initializer, penalized
//! model-based decomposition, and the two diffusion posterior samplers.

mod image_domain;
mod mbmd;
mod dps;

pub use dps::{jsdps, jumpstart_kl, sdps, JsdpsConfig, JumpstartInit, SdpsConfig};
pub use image_domain::{image_domain_decomposition, Calibration, ImageDomainConfig};
pub use mbmd::{mbmd, roughness, MbmdConfig};

use crate::error::{CoreError, Result};
use crate::image::MaterialImage;

/// Output of any decomposition algorithm.
#[derive(Debug, Clone)]
pub struct DecompositionResult {
    pub estimate: MaterialImage,
    /// Iterations (MBMD) or sampling steps (DPS variants).
    pub iterations: usize,
    pub wall_time_s: f64,
    /// Objective trace (MBMD) or step-size trace (DPS variants); one entry
    /// per iteration.
    pub trace: Vec<f64>,
    pub algorithm: String,
    pub config_echo: String,
}

impl DecompositionResult {
    pub fn validate(&self) -> Result<()> {
        if self.trace.len() != self.iterations {
            return Err(CoreError::InvalidInput(format!(
                "trace length {} != iterations {}",
                self.trace.len(),
                self.iterations
            )));
        }
        Ok(())
    }
}

/// Likelihood step-size rule for the DPS samplers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSizeSchedule {
    /// eta_t = eta / ||ybar(xhat0) - y||_{K^-1}, recomputed each step.
    ResidualNormalized { eta: f64 },
    /// eta_t = eta.
    Constant { eta: f64 },
}

impl StepSizeSchedule {
    pub fn eta(&self) -> f64 {
        match self {
            StepSizeSchedule::ResidualNormalized { eta } | StepSizeSchedule::Constant { eta } => {
                *eta
            }
        }
    }

    /// eta = 0 is the degenerate unconditional-sampling case; negative
    /// values are rejected.
    pub fn validate(&self) -> Result<()> {
        if self.eta() < 0.0 {
            return Err(CoreError::InvalidConfig("step size eta must be >= 0".into()));
        }
        Ok(())
    }
}
