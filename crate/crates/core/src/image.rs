//! Image containers: single-channel grids, attenuation images, and
//! two-channel (water, calcium) material density images.
//!
//! All grids are row-major `Vec<f64>` with explicit height/width. Pixel
//! size is carried in millimetres; line integrals are taken in centimetres.

use crate::error::{CoreError, Result};

/// Single-channel image on a square pixel lattice, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImagePlane {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(CoreError::ShapeMismatch(format!(
                "expected {}x{}={} values, got {}",
                height,
                width,
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Elementwise a*x + this, in place.
    pub fn axpy(&mut self, a: f64, x: &Self) {
        assert!(self.same_shape(x), "axpy shape mismatch");
        for (d, s) in self.data.iter_mut().zip(x.data.iter()) {
            *d += a * s;
        }
    }

    pub fn scale(&mut self, a: f64) {
        for d in self.data.iter_mut() {
            *d *= a;
        }
    }
}

/// Attenuation image (1/cm) used as input to the soft-threshold material maps.
#[derive(Debug, Clone)]
pub struct AttenuationImage {
    pub grid: ImagePlane,
    /// Pixel edge length in mm.
    pub pixel_size_mm: f64,
}

impl AttenuationImage {
    pub fn new(grid: ImagePlane, pixel_size_mm: f64) -> Result<Self> {
        if !grid.all_finite() {
            return Err(CoreError::NonFinite("attenuation image".into()));
        }
        if grid.data.iter().any(|&v| v < 0.0) {
            return Err(CoreError::InvalidInput(
                "attenuation values must be non-negative".into(),
            ));
        }
        Ok(Self { grid, pixel_size_mm })
    }
}

/// Two-channel material density image in g/ml: water and calcium.
///
/// This is the unknown `x` of the measurement model and the `x_0` of the
/// diffusion process.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialImage {
    pub water: ImagePlane,
    pub calcium: ImagePlane,
    /// Pixel edge length in mm.
    pub pixel_size_mm: f64,
}

/// Material channel index used wherever the two bases are handled generically.
pub const N_MATERIALS: usize = 2;

impl MaterialImage {
    pub fn zeros(height: usize, width: usize, pixel_size_mm: f64) -> Self {
        Self {
            water: ImagePlane::zeros(height, width),
            calcium: ImagePlane::zeros(height, width),
            pixel_size_mm,
        }
    }

    pub fn new(water: ImagePlane, calcium: ImagePlane, pixel_size_mm: f64) -> Result<Self> {
        if !water.same_shape(&calcium) {
            return Err(CoreError::ShapeMismatch(format!(
                "water {}x{} vs calcium {}x{}",
                water.height, water.width, calcium.height, calcium.width
            )));
        }
        Ok(Self { water, calcium, pixel_size_mm })
    }

    pub fn height(&self) -> usize {
        self.water.height
    }

    pub fn width(&self) -> usize {
        self.water.width
    }

    pub fn channel(&self, m: usize) -> &ImagePlane {
        match m {
            0 => &self.water,
            1 => &self.calcium,
            _ => panic!("material index out of range: {m}"),
        }
    }

    pub fn channel_mut(&mut self, m: usize) -> &mut ImagePlane {
        match m {
            0 => &mut self.water,
            1 => &mut self.calcium,
            _ => panic!("material index out of range: {m}"),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.water.same_shape(&other.water)
    }

    pub fn all_finite(&self) -> bool {
        self.water.all_finite() && self.calcium.all_finite()
    }

    /// Clamp both channels to be non-negative (densities are physical).
    pub fn clamp_non_negative(&mut self) {
        for v in self.water.data.iter_mut().chain(self.calcium.data.iter_mut()) {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    /// Sum of squared differences over both channels.
    pub fn sq_distance(&self, other: &Self) -> f64 {
        assert!(self.same_shape(other), "sq_distance shape mismatch");
        let mut acc = 0.0;
        for m in 0..N_MATERIALS {
            let a = &self.channel(m).data;
            let b = &other.channel(m).data;
            for (x, y) in a.iter().zip(b.iter()) {
                let d = x - y;
                acc += d * d;
            }
        }
        acc
    }

    pub fn axpy(&mut self, a: f64, x: &Self) {
        self.water.axpy(a, &x.water);
        self.calcium.axpy(a, &x.calcium);
    }

    pub fn scale(&mut self, a: f64) {
        self.water.scale(a);
        self.calcium.scale(a);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plane_indexing_is_row_major() {
        let mut p = ImagePlane::zeros(2, 3);
        p.set(1, 2, 7.0);
        assert_eq!(p.data[5], 7.0);
        assert_eq!(p.get(1, 2), 7.0);
    }

    #[test]
    fn material_image_requires_matching_channels() {
        let w = ImagePlane::zeros(4, 4);
        let c = ImagePlane::zeros(4, 5);
        assert!(MaterialImage::new(w, c, 0.8).is_err());
    }

    #[test]
    fn clamp_zeroes_negative_densities() {
        let mut img = MaterialImage::zeros(2, 2, 1.0);
        img.water.data[0] = -0.5;
        img.calcium.data[3] = -1e-9;
        img.clamp_non_negative();
        assert_eq!(img.water.data[0], 0.0);
        assert_eq!(img.calcium.data[3], 0.0);
        assert!(img.water.data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn attenuation_rejects_negative_and_nan() {
        let mut g = ImagePlane::zeros(2, 2);
        g.data[0] = -0.1;
        assert!(AttenuationImage::new(g.clone(), 0.8).is_err());
        g.data[0] = f64::NAN;
        assert!(AttenuationImage::new(g, 0.8).is_err());
    }
}
