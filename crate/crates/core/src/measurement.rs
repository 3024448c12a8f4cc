//! Measurement-model abstraction consumed by the decomposition algorithms.
//!
//! The polyenergetic spectral system is the production implementation; the
//! linearized single-energy model provides a conjugate-Gaussian setting
//! where the exact posterior is computable, used as the sampler oracle.

use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::image::MaterialImage;
use crate::projector::Projector;
use crate::spectral::{SpectralOperator, SpectralSinogram, N_CHANNELS};

pub trait MeasurementModel: Sync {
    fn image_shape(&self) -> (usize, usize);
    fn pixel_size_mm(&self) -> f64;

    /// Weighted squared residual `|| ybar(x) - y ||^2_{K^-1}`.
    fn fidelity(&self, x: &MaterialImage) -> Result<f64>;

    /// Fidelity and its gradient with respect to both density channels.
    fn fidelity_value_and_gradient(&self, x: &MaterialImage) -> Result<(f64, MaterialImage)>;

    fn fidelity_gradient(&self, x: &MaterialImage) -> Result<MaterialImage> {
        Ok(self.fidelity_value_and_gradient(x)?.1)
    }
}

/// A spectral operator bound to one measured sinogram.
pub struct SpectralMeasurement {
    pub op: Arc<SpectralOperator>,
    pub data: SpectralSinogram,
}

impl SpectralMeasurement {
    pub fn new(op: Arc<SpectralOperator>, data: SpectralSinogram) -> Self {
        Self { op, data }
    }
}

impl MeasurementModel for SpectralMeasurement {
    fn image_shape(&self) -> (usize, usize) {
        self.op.projector().geometry().image_shape
    }

    fn pixel_size_mm(&self) -> f64 {
        self.op.projector().geometry().pixel_size_mm
    }

    fn fidelity(&self, x: &MaterialImage) -> Result<f64> {
        self.op.data_fidelity(x, &self.data)
    }

    fn fidelity_value_and_gradient(&self, x: &MaterialImage) -> Result<(f64, MaterialImage)> {
        self.op.fidelity_value_and_gradient(x, &self.data)
    }
}

/// Linear-Gaussian measurement: z_c = sum_m q[c][m] (A x_m) + noise, with
/// per-ray inverse variances `weights`. This is the first-order expansion
/// of a single-energy system in the log domain.
pub struct LinearizedModel {
    proj: Arc<Projector>,
    /// q[channel][material].
    pub q: [[f64; 2]; 2],
    pub data: [Vec<f64>; N_CHANNELS],
    pub weights: [Vec<f64>; N_CHANNELS],
}

impl LinearizedModel {
    pub fn new(
        proj: Arc<Projector>,
        q: [[f64; 2]; 2],
        data: [Vec<f64>; N_CHANNELS],
        weights: [Vec<f64>; N_CHANNELS],
    ) -> Result<Self> {
        let n = proj.geometry().n_rays();
        for c in 0..N_CHANNELS {
            if data[c].len() != n || weights[c].len() != n {
                return Err(CoreError::ShapeMismatch(format!(
                    "channel {c}: expected {n} rays"
                )));
            }
            if weights[c].iter().any(|&w| w <= 0.0) {
                return Err(CoreError::InvalidInput("weights must be positive".into()));
            }
        }
        Ok(Self { proj, q, data, weights })
    }

    pub fn projector(&self) -> &Projector {
        &self.proj
    }

    /// Noise-free forward map per channel.
    pub fn forward(&self, x: &MaterialImage) -> [Vec<f64>; N_CHANNELS] {
        let n = self.proj.geometry().n_rays();
        let mut lw = vec![0.0; n];
        let mut lc = vec![0.0; n];
        self.proj.project_into(&x.water.data, &mut lw);
        self.proj.project_into(&x.calcium.data, &mut lc);
        let mut out = [vec![0.0; n], vec![0.0; n]];
        for c in 0..N_CHANNELS {
            for r in 0..n {
                out[c][r] = self.q[c][0] * lw[r] + self.q[c][1] * lc[r];
            }
        }
        out
    }
}

impl MeasurementModel for LinearizedModel {
    fn image_shape(&self) -> (usize, usize) {
        self.proj.geometry().image_shape
    }

    fn pixel_size_mm(&self) -> f64 {
        self.proj.geometry().pixel_size_mm
    }

    fn fidelity(&self, x: &MaterialImage) -> Result<f64> {
        let z = self.forward(x);
        let mut acc = 0.0;
        for c in 0..N_CHANNELS {
            for r in 0..z[c].len() {
                let res = z[c][r] - self.data[c][r];
                acc += self.weights[c][r] * res * res;
            }
        }
        Ok(acc)
    }

    fn fidelity_value_and_gradient(&self, x: &MaterialImage) -> Result<(f64, MaterialImage)> {
        let z = self.forward(x);
        let n = z[0].len();
        let mut fid = 0.0;
        let mut field = [vec![0.0; n], vec![0.0; n]];
        for c in 0..N_CHANNELS {
            for r in 0..n {
                let res = z[c][r] - self.data[c][r];
                let w = self.weights[c][r];
                fid += w * res * res;
                field[0][r] += 2.0 * w * res * self.q[c][0];
                field[1][r] += 2.0 * w * res * self.q[c][1];
            }
        }
        let (h, w) = self.image_shape();
        let mut grad = MaterialImage::zeros(h, w, self.pixel_size_mm());
        self.proj.backproject_into(&field[0], &mut grad.water.data);
        self.proj.backproject_into(&field[1], &mut grad.calcium.data);
        Ok((fid, grad))
    }
}
