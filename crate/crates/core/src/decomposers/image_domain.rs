//! First-pass image-domain decomposition.
//!
//! Per channel: log-normalize counts against the air scan, FBP to an
//! effective attenuation map (each tube's view subset for dual-kVp, all
//! views per layer for dual-layer), then map the two channel attenuations
//! to (water, calcium) per pixel with a 2x2 calibration matrix fitted by
//! ridge-stabilized least squares on known-density inserts.

use crate::error::{CoreError, Result};
use crate::fbp::{fbp, FbpFilter};
use crate::geometry::Geometry;
use crate::image::{ImagePlane, MaterialImage};
use crate::phantoms::disk_insert_table;
use crate::projector::LineIntegralSinogram;
use crate::spectral::{SpectralOperator, SpectralSinogram};

#[derive(Debug, Clone)]
pub struct ImageDomainConfig {
    pub filter: FbpFilter,
    pub ridge: f64,
    /// Counts are floored at this value before the log transform.
    pub count_floor: f64,
}

impl Default for ImageDomainConfig {
    fn default() -> Self {
        Self { filter: FbpFilter::Hann, ridge: 1e-6, count_floor: 0.5 }
    }
}

/// Fitted per-system calibration: rho = matrix * mu_hat.
#[derive(Debug, Clone, Copy)]
pub struct Calibration {
    pub matrix: [[f64; 2]; 2],
    pub condition: f64,
}

const MAX_CONDITION: f64 = 1e8;

/// Per-channel FBP attenuation reconstruction of a spectral sinogram.
fn channel_attenuation(
    y: &SpectralSinogram,
    op: &SpectralOperator,
    channel: usize,
    cfg: &ImageDomainConfig,
) -> Result<ImagePlane> {
    let geom = op.projector().geometry();
    let air = op.system().air_count(channel);
    if air <= 0.0 {
        return Err(CoreError::InvalidConfig("air scan must be positive".into()));
    }
    let active_views: Vec<usize> = (0..geom.n_views)
        .filter(|&v| y.active(channel, v))
        .collect();
    if active_views.is_empty() {
        return Err(CoreError::InvalidInput(format!(
            "channel {channel} has no active views"
        )));
    }
    let sub_geom = Geometry {
        n_views: active_views.len(),
        n_det: geom.n_det,
        det_pitch_mm: geom.det_pitch_mm,
        pixel_size_mm: geom.pixel_size_mm,
        image_shape: geom.image_shape,
        arc_deg: geom.arc_deg,
        view_angles: active_views.iter().map(|&v| geom.view_angles[v]).collect(),
        beam: geom.beam,
    };
    let mut sino = LineIntegralSinogram::zeros(sub_geom.n_views, geom.n_det);
    for (i, &v) in active_views.iter().enumerate() {
        for d in 0..geom.n_det {
            let counts = y.counts[channel][v * geom.n_det + d].max(cfg.count_floor);
            sino.data[i * geom.n_det + d] = -(counts / air).ln();
        }
    }
    fbp(&sino, &sub_geom, cfg.filter)
}

/// Known-density inserts in a water cylinder, so calibration sees the same
/// beam-hardening regime as a body-sized object.
fn calibration_phantom(shape: (usize, usize), pixel_size_mm: f64) -> MaterialImage {
    let mut img = MaterialImage::zeros(shape.0, shape.1, pixel_size_mm);
    let mut paint_disk = |cx: f64, cy: f64, radius: f64, water: f64, calcium: f64| {
        for r in 0..shape.0 {
            let yy = (r as f64 + 0.5) / shape.0 as f64;
            for c in 0..shape.1 {
                let xx = (c as f64 + 0.5) / shape.1 as f64;
                if ((xx - cx).powi(2) + (yy - cy).powi(2)).sqrt() <= radius {
                    img.water.set(r, c, water);
                    img.calcium.set(r, c, calcium);
                }
            }
        }
    };
    paint_disk(0.5, 0.5, 0.45, 1.0, 0.0);
    for ins in disk_insert_table() {
        paint_disk(ins.cx, ins.cy, ins.radius, ins.water, ins.calcium);
    }
    img
}


fn insert_interior_mean(plane: &ImagePlane, cx: f64, cy: f64, radius: f64) -> f64 {
    let (h, w) = (plane.height, plane.width);
    let (mut sum, mut n) = (0.0, 0usize);
    for r in 0..h {
        let yy = (r as f64 + 0.5) / h as f64;
        for c in 0..w {
            let xx = (c as f64 + 0.5) / w as f64;
            if ((xx - cx).powi(2) + (yy - cy).powi(2)).sqrt() <= 0.7 * radius {
                sum += plane.get(r, c);
                n += 1;
            }
        }
    }
    sum / n.max(1) as f64
}

/// Fit the 2x2 attenuation-to-density map on a noiseless simulation of the
/// calibration phantom through this system.
pub fn fit_calibration(op: &SpectralOperator, cfg: &ImageDomainConfig) -> Result<Calibration> {
    let geom = op.projector().geometry();
    let phantom = calibration_phantom(geom.image_shape, geom.pixel_size_mm);
    let mean = op.mean_measurement(&phantom)?;
    let mu = [
        channel_attenuation(&mean, op, 0, cfg)?,
        channel_attenuation(&mean, op, 1, cfg)?,
    ];
    // Rows of U: per-region (mu0, mu1); rows of V: (water, calcium);
    // the four inserts plus a background patch.
    let mut points: Vec<(f64, f64, f64, f64, f64)> = disk_insert_table()
        .iter()
        .map(|i| (i.cx, i.cy, i.radius, i.water, i.calcium))
        .collect();
    points.push((0.5, 0.5, 0.07, 1.0, 0.0));
    let mut g = [[0.0f64; 2]; 2];
    let mut b = [[0.0f64; 2]; 2];
    for &(cx, cy, radius, water, calcium) in &points {
        let uu = [
            insert_interior_mean(&mu[0], cx, cy, radius),
            insert_interior_mean(&mu[1], cx, cy, radius),
        ];
        let vv = [water, calcium];
        for a in 0..2 {
            for c in 0..2 {
                g[a][c] += uu[a] * uu[c];
                b[a][c] += uu[a] * vv[c];
            }
        }
    }
    // Condition number of G before ridge stabilization.
    let tr = g[0][0] + g[1][1];
    let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let (l1, l2) = (tr / 2.0 + disc, tr / 2.0 - disc);
    let condition = if l2 <= 0.0 { f64::INFINITY } else { l1 / l2 };
    if condition > MAX_CONDITION {
        return Err(CoreError::Numerical(format!(
            "singular calibration: channel attenuations are degenerate \
             (condition number {condition:.3e} > {MAX_CONDITION:.0e})"
        )));
    }
    let gr = [[g[0][0] + cfg.ridge, g[0][1]], [g[1][0], g[1][1] + cfg.ridge]];
    let detr = gr[0][0] * gr[1][1] - gr[0][1] * gr[1][0];
    let ginv = [
        [gr[1][1] / detr, -gr[0][1] / detr],
        [-gr[1][0] / detr, gr[0][0] / detr],
    ];
    // M^T = G^-1 B, so M[m][c] maps mu (per channel) to density m.
    let mut mt = [[0.0f64; 2]; 2];
    for a in 0..2 {
        for c in 0..2 {
            mt[a][c] = ginv[a][0] * b[0][c] + ginv[a][1] * b[1][c];
        }
    }
    let matrix = [[mt[0][0], mt[1][0]], [mt[0][1], mt[1][1]]];
    Ok(Calibration { matrix, condition })
}

/// First-pass estimate from per-channel FBP and the calibration map.
pub fn image_domain_decomposition(
    y: &SpectralSinogram,
    op: &SpectralOperator,
    cfg: &ImageDomainConfig,
) -> Result<MaterialImage> {
    let geom = op.projector().geometry();
    if y.n_views != geom.n_views || y.n_det != geom.n_det {
        return Err(CoreError::ShapeMismatch(format!(
            "sinogram {}x{} vs geometry {}x{}",
            y.n_views, y.n_det, geom.n_views, geom.n_det
        )));
    }
    let cal = fit_calibration(op, cfg)?;
    let mu = [
        channel_attenuation(y, op, 0, cfg)?,
        channel_attenuation(y, op, 1, cfg)?,
    ];
    let (h, w) = geom.image_shape;
    let mut out = MaterialImage::zeros(h, w, geom.pixel_size_mm);
    for j in 0..h * w {
        let m0 = mu[0].data[j];
        let m1 = mu[1].data[j];
        out.water.data[j] = cal.matrix[0][0] * m0 + cal.matrix[0][1] * m1;
        out.calcium.data[j] = cal.matrix[1][0] * m0 + cal.matrix[1][1] * m1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Geometry;
    use crate::projector::Projector;
    use crate::spectral::{SpectralSystem, ViewAssignment};
    use std::sync::Arc;

    fn operator(sys: SpectralSystem, size: usize, n_views: usize, n_det: usize) -> SpectralOperator {
        let geom = Geometry::desk_small(size, n_views, n_det);
        SpectralOperator::new(sys, Arc::new(Projector::new(&geom).unwrap())).unwrap()
    }

    fn cylinder(size: usize, water: f64) -> MaterialImage {
        let mut img = MaterialImage::zeros(size, size, 0.8);
        for r in 0..size {
            let y = (r as f64 + 0.5) / size as f64 - 0.5;
            for c in 0..size {
                let x = (c as f64 + 0.5) / size as f64 - 0.5;
                if (x * x + y * y).sqrt() <= 0.35 {
                    img.water.set(r, c, water);
                }
            }
        }
        img
    }

    #[test]
    fn noiseless_water_cylinder_recovers_density() {
        for sys in [SpectralSystem::dual_kvp(2e4), SpectralSystem::dual_layer(2e4)] {
            let op = operator(sys, 64, 180, 96);
            let truth = cylinder(64, 1.0);
            let mean = op.mean_measurement(&truth).unwrap();
            let est = image_domain_decomposition(&mean, &op, &ImageDomainConfig::default())
                .unwrap();
            // Interior means within 10% for water, |calcium| <= 0.05.
            let size = 64;
            let (mut sw, mut sc, mut n) = (0.0, 0.0, 0);
            for r in 0..size {
                let y = (r as f64 + 0.5) / size as f64 - 0.5;
                for c in 0..size {
                    let x = (c as f64 + 0.5) / size as f64 - 0.5;
                    if (x * x + y * y).sqrt() <= 0.28 {
                        sw += est.water.get(r, c);
                        sc += est.calcium.get(r, c);
                        n += 1;
                    }
                }
            }
            let (mw, mc) = (sw / n as f64, sc / n as f64);
            assert!((mw - 1.0).abs() <= 0.10, "water mean {mw}");
            assert!(mc.abs() <= 0.05, "calcium mean {mc}");
        }
    }

    #[test]
    fn air_scan_decomposes_to_zero() {
        let op = operator(SpectralSystem::dual_kvp(2e4), 64, 180, 96);
        let mean = op.mean_measurement(&MaterialImage::zeros(64, 64, 0.8)).unwrap();
        let est = image_domain_decomposition(&mean, &op, &ImageDomainConfig::default()).unwrap();
        assert!(est.water.mean().abs() <= 1e-3, "water mean {}", est.water.mean());
        assert!(est.calcium.mean().abs() <= 1e-3, "calcium mean {}", est.calcium.mean());
    }

    #[test]
    fn calibration_reproduces_insert_densities() {
        let op = operator(SpectralSystem::dual_layer(2e4), 64, 180, 96);
        let cfg = ImageDomainConfig::default();
        let truth = calibration_phantom((64, 64), 0.8);
        let mean = op.mean_measurement(&truth).unwrap();
        let est = image_domain_decomposition(&mean, &op, &cfg).unwrap();
        for ins in disk_insert_table() {
            let w = insert_interior_mean(&est.water, ins.cx, ins.cy, ins.radius);
            let c = insert_interior_mean(&est.calcium, ins.cx, ins.cy, ins.radius);
            // Within 2% of the density scale (1 g/ml water, 1.2 g/ml calcium).
            assert!((w - ins.water).abs() <= 0.02 * 1.0 + 0.02, "water {w} vs {}", ins.water);
            assert!((c - ins.calcium).abs() <= 0.02 * 1.2 + 0.02, "calcium {c} vs {}", ins.calcium);
        }
    }

    #[test]
    fn degenerate_channels_fail_with_condition_diagnostic() {
        // Identical q and spectra in both channels make the two attenuation
        // maps proportional, so the 2x2 fit is singular.
        let sys = SpectralSystem::single_energy(2e4, 0.2, 0.4, ViewAssignment::AllViewsBoth);
        let op = operator(sys, 64, 180, 96);
        let err = fit_calibration(&op, &ImageDomainConfig::default()).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("condition number"), "got: {msg}");
    }
}
