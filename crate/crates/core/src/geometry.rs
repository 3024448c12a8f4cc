//! Acquisition geometry: image lattice, detector layout, and view angles.
//!
//! Physical coordinates are centimetres. The image is centred on the origin;
//! pixel (row, col) has centre `x = (col + 0.5 - W/2) * px`,
//! `y = (H/2 - 0.5 - row) * px` with `px` the pixel edge in cm.

use crate::error::{CoreError, Result};

/// Beam model. Parallel is the default desk-scale choice; fan uses a flat
/// equispaced detector described by source-to-isocentre and
/// source-to-detector distances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BeamModel {
    Parallel,
    Fan {
        source_to_iso_mm: f64,
        source_to_det_mm: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub n_views: usize,
    pub n_det: usize,
    /// Detector element pitch in mm (at the physical detector).
    pub det_pitch_mm: f64,
    /// Image pixel edge in mm.
    pub pixel_size_mm: f64,
    /// Image grid (height, width).
    pub image_shape: (usize, usize),
    /// Angular arc covered by the views, degrees.
    pub arc_deg: f64,
    /// View angles in radians, strictly increasing.
    pub view_angles: Vec<f64>,
    pub beam: BeamModel,
}

impl Geometry {
    /// Evenly spaced views over `arc_deg` starting at zero (end exclusive).
    pub fn new(
        image_shape: (usize, usize),
        pixel_size_mm: f64,
        n_views: usize,
        n_det: usize,
        det_pitch_mm: f64,
        arc_deg: f64,
        beam: BeamModel,
    ) -> Result<Self> {
        if n_views < 1 {
            return Err(CoreError::InvalidConfig("n_views must be >= 1".into()));
        }
        if det_pitch_mm <= 0.0 || pixel_size_mm <= 0.0 {
            return Err(CoreError::InvalidConfig("pitch and pixel size must be positive".into()));
        }
        if let BeamModel::Fan { source_to_iso_mm, source_to_det_mm } = beam {
            if source_to_iso_mm <= 0.0 || source_to_det_mm <= source_to_iso_mm {
                return Err(CoreError::InvalidConfig(
                    "fan beam requires 0 < source_to_iso < source_to_det".into(),
                ));
            }
        }
        let step = arc_deg.to_radians() / n_views as f64;
        let view_angles = (0..n_views).map(|i| i as f64 * step).collect();
        Ok(Self {
            n_views,
            n_det,
            det_pitch_mm,
            pixel_size_mm,
            image_shape,
            arc_deg,
            view_angles,
            beam,
        })
    }

    /// Desk-scale default: 128x128 image, 0.8 mm pixels, 192 detectors at
    /// 1.0 mm, 360 parallel views over 360 degrees.
    pub fn desk_default() -> Self {
        Self::new((128, 128), 0.8, 360, 192, 1.0, 360.0, BeamModel::Parallel).unwrap()
    }

    /// Smaller configuration used by fast experiments and tests.
    pub fn desk_small(size: usize, n_views: usize, n_det: usize) -> Self {
        Self::new((size, size), 0.8, n_views, n_det, 1.0, 360.0, BeamModel::Parallel).unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.view_angles.len() != self.n_views {
            return Err(CoreError::InvalidConfig("view_angles length != n_views".into()));
        }
        if !self.view_angles.windows(2).all(|w| w[0] < w[1]) {
            return Err(CoreError::InvalidConfig("view angles must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn n_rays(&self) -> usize {
        self.n_views * self.n_det
    }

    pub fn n_pixels(&self) -> usize {
        self.image_shape.0 * self.image_shape.1
    }

    /// Pixel edge in cm.
    pub fn pixel_cm(&self) -> f64 {
        self.pixel_size_mm / 10.0
    }

    /// Detector pitch in cm, referred to the isocentre plane for fan beam.
    pub fn det_pitch_iso_cm(&self) -> f64 {
        match self.beam {
            BeamModel::Parallel => self.det_pitch_mm / 10.0,
            BeamModel::Fan { source_to_iso_mm, source_to_det_mm } => {
                self.det_pitch_mm / 10.0 * (source_to_iso_mm / source_to_det_mm)
            }
        }
    }

    /// Detector coordinate (cm, isocentre plane) of element centre `d`.
    pub fn det_coord(&self, d: usize) -> f64 {
        (d as f64 + 0.5 - self.n_det as f64 / 2.0) * self.det_pitch_iso_cm()
    }

    /// Endpoints of ray (view, det) as (start, end) in cm, spanning the grid.
    pub fn ray_endpoints(&self, view: usize, det: usize) -> ([f64; 2], [f64; 2]) {
        let theta = self.view_angles[view];
        let (sin_t, cos_t) = theta.sin_cos();
        let (h, w) = self.image_shape;
        let half_diag = 0.5 * self.pixel_cm() * ((h * h + w * w) as f64).sqrt() + 1.0;
        match self.beam {
            BeamModel::Parallel => {
                // Ray direction omega, detector axis omega_perp.
                let s = self.det_coord(det);
                let (px, py) = (-s * sin_t, s * cos_t);
                let a = [px - half_diag * cos_t, py - half_diag * sin_t];
                let b = [px + half_diag * cos_t, py + half_diag * sin_t];
                (a, b)
            }
            BeamModel::Fan { source_to_iso_mm, .. } => {
                let r_si = source_to_iso_mm / 10.0;
                // Source opposite the detector; at theta = 0 the source sits
                // at (-R, 0) and the virtual detector axis is +y.
                let src = [-r_si * cos_t, -r_si * sin_t];
                let u = self.det_coord(det);
                let det_pt = [-u * sin_t, u * cos_t];
                let dir = [det_pt[0] - src[0], det_pt[1] - src[1]];
                let norm = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
                let dir = [dir[0] / norm, dir[1] / norm];
                let reach = r_si + half_diag;
                let b = [src[0] + reach * dir[0], src[1] + reach * dir[1]];
                (src, b)
            }
        }
    }
}
