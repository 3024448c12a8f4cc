//! Image-quality and ensemble-uncertainty metrics.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5, k1 = 0.01, k2 = 0.03),
//! evaluated on valid windows only and averaged, matching the conventional
//! implementation. Scalar metrics run inside a circular field of view by
//! default, excluding corner pixels never crossed by rays.

use serde::Serialize;

use crate::error::{CoreError, Result};
use crate::image::{ImagePlane, MaterialImage};

#[derive(Debug, Clone)]
pub struct MetricParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Restrict scalar metrics to the inscribed circular field of view.
    pub fov_mask: bool,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, fov_mask: true }
    }
}

impl MetricParams {
    /// Full-frame evaluation (no field-of-view mask).
    pub fn full_frame() -> Self {
        Self { fov_mask: false, ..Self::default() }
    }
}

/// Inscribed circular mask; pixel centres within min(h, w)/2 of the image
/// centre.
pub fn fov_mask(height: usize, width: usize) -> Vec<bool> {
    let r = height.min(width) as f64 / 2.0;
    let (cy, cx) = (height as f64 / 2.0, width as f64 / 2.0);
    let mut mask = vec![false; height * width];
    for row in 0..height {
        for col in 0..width {
            let dy = row as f64 + 0.5 - cy;
            let dx = col as f64 + 0.5 - cx;
            mask[row * width + col] = (dx * dx + dy * dy).sqrt() <= r;
        }
    }
    mask
}

fn check_same_shape(a: &ImagePlane, b: &ImagePlane) -> Result<()> {
    if !a.same_shape(b) {
        return Err(CoreError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let r = window as isize / 2;
    let mut k = Vec::with_capacity(window);
    for x in -r..=r {
        k.push((-0.5 * (x as f64 / sigma).powi(2)).exp());
    }
    let sum: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable valid-window Gaussian filter; output is (h-2r) x (w-2r).
fn filter_valid(img: &ImagePlane, kernel: &[f64]) -> ImagePlane {
    let r = kernel.len() / 2;
    let (h, w) = (img.height, img.width);
    let (oh, ow) = (h - 2 * r, w - 2 * r);
    // Horizontal pass.
    let mut tmp = vec![0.0f64; h * ow];
    for row in 0..h {
        for col in 0..ow {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * img.data[row * w + col + k];
            }
            tmp[row * ow + col] = acc;
        }
    }
    // Vertical pass.
    let mut out = ImagePlane::zeros(oh, ow);
    for row in 0..oh {
        for col in 0..ow {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[(row + k) * ow + col];
            }
            out.data[row * ow + col] = acc;
        }
    }
    out
}

/// Mean local SSIM between two planes with the given data range.
pub fn ssim(a: &ImagePlane, b: &ImagePlane, data_range: f64, params: &MetricParams) -> Result<f64> {
    check_same_shape(a, b)?;
    if data_range <= 0.0 {
        return Err(CoreError::InvalidInput("data range must be positive".into()));
    }
    let r = params.window / 2;
    if a.height < params.window || a.width < params.window {
        return Err(CoreError::InvalidInput(format!(
            "image smaller than the {}x{} SSIM window",
            params.window, params.window
        )));
    }
    let kernel = gaussian_kernel(params.window, params.sigma);
    let mul = |x: &ImagePlane, y: &ImagePlane| {
        let mut out = x.clone();
        for (o, v) in out.data.iter_mut().zip(y.data.iter()) {
            *o *= v;
        }
        out
    };
    let ux = filter_valid(a, &kernel);
    let uy = filter_valid(b, &kernel);
    let uxx = filter_valid(&mul(a, a), &kernel);
    let uyy = filter_valid(&mul(b, b), &kernel);
    let uxy = filter_valid(&mul(a, b), &kernel);

    let c1 = (params.k1 * data_range).powi(2);
    let c2 = (params.k2 * data_range).powi(2);
    let mask = if params.fov_mask { Some(fov_mask(a.height, a.width)) } else { None };
    let mut sum = 0.0;
    let mut n = 0usize;
    for row in 0..ux.height {
        for col in 0..ux.width {
            if let Some(m) = &mask {
                // Window centre in original coordinates.
                if !m[(row + r) * a.width + col + r] {
                    continue;
                }
            }
            let i = row * ux.width + col;
            let (mx, my) = (ux.data[i], uy.data[i]);
            let vx = uxx.data[i] - mx * mx;
            let vy = uyy.data[i] - my * my;
            let vxy = uxy.data[i] - mx * my;
            let s = ((2.0 * mx * my + c1) * (2.0 * vxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            sum += s;
            n += 1;
        }
    }
    if n == 0 {
        return Err(CoreError::InvalidInput("empty SSIM evaluation region".into()));
    }
    Ok(sum / n as f64)
}

fn masked_mse(a: &ImagePlane, b: &ImagePlane, use_mask: bool) -> (f64, usize) {
    let mask = if use_mask { Some(fov_mask(a.height, a.width)) } else { None };
    let mut acc = 0.0;
    let mut n = 0usize;
    for i in 0..a.data.len() {
        if let Some(m) = &mask {
            if !m[i] {
                continue;
            }
        }
        let d = a.data[i] - b.data[i];
        acc += d * d;
        n += 1;
    }
    (acc / n.max(1) as f64, n)
}

/// Peak signal-to-noise ratio in dB; +infinity when the images agree
/// exactly.
pub fn psnr(a: &ImagePlane, b: &ImagePlane, data_range: f64, params: &MetricParams) -> Result<f64> {
    check_same_shape(a, b)?;
    if data_range <= 0.0 {
        return Err(CoreError::InvalidInput("data range must be positive".into()));
    }
    let (mse, _) = masked_mse(a, b, params.fov_mask);
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Root-mean-square error in the images' native units.
pub fn rmse(a: &ImagePlane, b: &ImagePlane, params: &MetricParams) -> Result<f64> {
    check_same_shape(a, b)?;
    Ok(masked_mse(a, b, params.fov_mask).0.sqrt())
}

/// Per-channel quality summary of an estimate against ground truth.
#[derive(Debug, Clone, Serialize)]
pub struct ChannelQuality {
    pub ssim: f64,
    pub psnr_db: f64,
    pub rmse: f64,
    pub data_range: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct QualityReport {
    pub water: ChannelQuality,
    pub calcium: ChannelQuality,
    pub fov_mask: bool,
    pub window: usize,
    pub sigma: f64,
}

/// Quality metrics per channel; the data range convention is
/// max - min of the ground-truth channel (1.0 when degenerate).
pub fn quality_report(
    estimate: &MaterialImage,
    truth: &MaterialImage,
    params: &MetricParams,
) -> Result<QualityReport> {
    if !estimate.same_shape(truth) {
        return Err(CoreError::ShapeMismatch("estimate vs truth".into()));
    }
    let channel = |m: usize| -> Result<ChannelQuality> {
        let t = truth.channel(m);
        let e = estimate.channel(m);
        let lo = t.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = t.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = if hi > lo { hi - lo } else { 1.0 };
        Ok(ChannelQuality {
            ssim: ssim(e, t, range, params)?,
            psnr_db: psnr(e, t, range, params)?,
            rmse: rmse(e, t, params)?,
            data_range: range,
        })
    };
    Ok(QualityReport {
        water: channel(0)?,
        calcium: channel(1)?,
        fov_mask: params.fov_mask,
        window: params.window,
        sigma: params.sigma,
    })
}

/// Ensemble bias and spread maps with their norms.
#[derive(Debug, Clone)]
pub struct EnsembleStats {
    /// Per-pixel |mean(samples) - truth|.
    pub bias_map: MaterialImage,
    /// Per-pixel population standard deviation.
    pub std_map: MaterialImage,
    pub ensemble_size: usize,
    /// L2 norm of the bias map over both channels (inside the mask).
    pub bias_norm: f64,
    /// L2 norm of the standard-deviation map.
    pub std_norm: f64,
    /// L2 norm of the variance map; shipped alongside std_norm because the
    /// second-moment reading of the uncertainty formula lacks a square
    /// root.
    pub var_norm: f64,
}

pub fn ensemble_stats(
    samples: &[MaterialImage],
    truth: &MaterialImage,
    params: &MetricParams,
) -> Result<EnsembleStats> {
    if samples.len() < 2 {
        return Err(CoreError::InvalidInput(
            "ensemble statistics need at least 2 samples".into(),
        ));
    }
    for s in samples {
        if !s.same_shape(truth) {
            return Err(CoreError::ShapeMismatch("ensemble sample vs truth".into()));
        }
    }
    let (h, w) = (truth.height(), truth.width());
    let n = samples.len() as f64;
    let mut bias_map = MaterialImage::zeros(h, w, truth.pixel_size_mm);
    let mut std_map = MaterialImage::zeros(h, w, truth.pixel_size_mm);
    let mask = if params.fov_mask { Some(fov_mask(h, w)) } else { None };
    let (mut b2, mut s2sum, mut v2) = (0.0, 0.0, 0.0);
    for m in 0..2 {
        for j in 0..h * w {
            let mut mean = 0.0;
            for s in samples {
                mean += s.channel(m).data[j];
            }
            mean /= n;
            let mut var = 0.0;
            for s in samples {
                var += (s.channel(m).data[j] - mean).powi(2);
            }
            var /= n; // population convention
            let bias = (mean - truth.channel(m).data[j]).abs();
            bias_map.channel_mut(m).data[j] = bias;
            std_map.channel_mut(m).data[j] = var.sqrt();
            let in_mask = mask.as_ref().map_or(true, |mk| mk[j]);
            if in_mask {
                b2 += bias * bias;
                s2sum += var;
                v2 += var * var;
            }
        }
    }
    Ok(EnsembleStats {
        bias_map,
        std_map,
        ensemble_size: samples.len(),
        bias_norm: b2.sqrt(),
        std_norm: s2sum.sqrt(),
        var_norm: v2.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(f: impl Fn(f64, f64) -> f64) -> ImagePlane {
        let (h, w) = (64, 64);
        let mut p = ImagePlane::zeros(h, w);
        for i in 0..h {
            for j in 0..w {
                p.data[i * w + j] = f(i as f64, j as f64);
            }
        }
        p
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let a = pattern(|i, j| 0.5 + 0.25 * (i / 5.0).sin() * (j / 7.0).cos());
        let s = ssim(&a, &a, 1.0, &MetricParams::default()).unwrap();
        assert_eq!(s, 1.0);
    }

    #[test]
    fn ssim_matches_reference_implementation() {
        // Frozen outputs of scikit-image structural_similarity with
        // win_size=11, gaussian_weights=True, sigma=1.5,
        // use_sample_covariance=False, data_range=1.0 on these patterns.
        let a = pattern(|i, j| 0.5 + 0.25 * (i / 5.0).sin() * (j / 7.0).cos());
        let cases = [
            (pattern(|i, j| 0.9 * (0.5 + 0.25 * (i / 5.0).sin() * (j / 7.0).cos()) + 0.05),
             0.995474534838350),
            (pattern(|i, j| 0.5 + 0.25 * (i / 5.0).sin() * (j / 7.0).cos() + 0.1 * (j / 3.0).sin()),
             0.756905703336563),
            (pattern(|i, j| 0.5 + 0.25 * (i / 4.0 + 1.0).cos() * (j / 6.0 + 2.0).sin()),
             0.068289222992398),
        ];
        let params = MetricParams::full_frame();
        for (b, expect) in cases {
            let s = ssim(&a, &b, 1.0, &params).unwrap();
            assert!((s - expect).abs() <= 1e-6, "ssim {s} vs reference {expect}");
        }
    }

    #[test]
    fn ssim_anticorrelated_is_non_positive() {
        let a = pattern(|i, j| 0.3 * (i / 4.0).sin() * (j / 5.0).cos());
        let b = pattern(|i, j| -0.3 * (i / 4.0).sin() * (j / 5.0).cos() + 0.5);
        let s = ssim(&a, &b, 1.0, &MetricParams::full_frame()).unwrap();
        assert!(s <= 0.0, "anticorrelated ssim {s}");
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = pattern(|i, j| 0.5 + 0.2 * (i / 6.0).sin() + 0.1 * (j / 9.0).cos());
        let b = pattern(|i, j| 0.4 + 0.3 * (i / 5.0).cos() * (j / 4.0).sin());
        let p = MetricParams::default();
        let s1 = ssim(&a, &b, 1.0, &p).unwrap();
        let s2 = ssim(&b, &a, 1.0, &p).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn psnr_hand_value_and_sentinel() {
        // MSE 0.01 with range 1 -> 20 dB: constant offset of 0.1.
        let a = pattern(|_, _| 0.5);
        let b = pattern(|_, _| 0.6);
        let p = MetricParams::full_frame();
        let v = psnr(&a, &b, 1.0, &p).unwrap();
        assert!((v - 20.0).abs() < 1e-9, "psnr {v}");
        assert_eq!(psnr(&a, &a, 1.0, &p).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_scale_invariance() {
        let a = pattern(|i, j| 0.5 + 0.2 * (i / 6.0).sin() * (j / 5.0).cos());
        let b = pattern(|i, j| 0.45 + 0.21 * (i / 6.0).sin() * (j / 5.0).cos());
        let p = MetricParams::default();
        let v1 = psnr(&a, &b, 1.0, &p).unwrap();
        let mut a2 = a.clone();
        let mut b2 = b.clone();
        a2.scale(7.0);
        b2.scale(7.0);
        let v2 = psnr(&a2, &b2, 7.0, &p).unwrap();
        assert!((v1 - v2).abs() < 1e-9, "{v1} vs {v2}");
    }

    fn material(f: impl Fn(usize, usize, usize) -> f64) -> MaterialImage {
        let mut img = MaterialImage::zeros(8, 8, 1.0);
        for m in 0..2 {
            for i in 0..8 {
                for j in 0..8 {
                    img.channel_mut(m).data[i * 8 + j] = f(m, i, j);
                }
            }
        }
        img
    }

    #[test]
    fn ensemble_identical_samples_are_certain() {
        let truth = material(|m, i, j| 0.1 * (m + 1) as f64 + 0.01 * (i * 8 + j) as f64);
        let samples = vec![truth.clone(), truth.clone(), truth.clone()];
        let st = ensemble_stats(&samples, &truth, &MetricParams::full_frame()).unwrap();
        // The sample mean of identical values differs from them only by
        // accumulation rounding.
        assert!(st.bias_norm <= 1e-12, "bias {}", st.bias_norm);
        assert!(st.std_norm <= 1e-12);
        assert!(st.var_norm <= 1e-12);
    }

    #[test]
    fn ensemble_symmetric_pair_population_convention() {
        let truth = material(|_, _, _| 1.0);
        let mut up = truth.clone();
        let mut down = truth.clone();
        let delta = 0.25;
        up.water.data[9] += delta;
        down.water.data[9] -= delta;
        let st = ensemble_stats(&[up, down], &truth, &MetricParams::full_frame()).unwrap();
        assert_eq!(st.bias_map.water.data[9], 0.0);
        assert!((st.std_map.water.data[9] - delta).abs() < 1e-12);
    }

    #[test]
    fn ensemble_matches_brute_force_and_is_permutation_invariant() {
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha12Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let truth = material(|m, i, j| 0.5 + 0.1 * m as f64 + 0.02 * (i + j) as f64);
        let samples: Vec<MaterialImage> = (0..5)
            .map(|_| {
                let mut s = truth.clone();
                for v in s.water.data.iter_mut().chain(s.calcium.data.iter_mut()) {
                    *v += rng.gen_range(-0.2..0.2);
                }
                s
            })
            .collect();
        let p = MetricParams::full_frame();
        let st = ensemble_stats(&samples, &truth, &p).unwrap();

        // Brute force per pixel.
        let mut b2 = 0.0;
        let mut v_acc = 0.0;
        for m in 0..2 {
            for j in 0..64 {
                let vals: Vec<f64> = samples.iter().map(|s| s.channel(m).data[j]).collect();
                let mean = vals.iter().sum::<f64>() / 5.0;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
                let bias = (mean - truth.channel(m).data[j]).abs();
                assert!((st.bias_map.channel(m).data[j] - bias).abs() < 1e-10);
                assert!((st.std_map.channel(m).data[j] - var.sqrt()).abs() < 1e-10);
                b2 += bias * bias;
                v_acc += var;
            }
        }
        assert!((st.bias_norm - b2.sqrt()).abs() < 1e-10);
        assert!((st.std_norm - v_acc.sqrt()).abs() < 1e-10);

        let mut reordered = samples.clone();
        reordered.reverse();
        let st2 = ensemble_stats(&reordered, &truth, &p).unwrap();
        assert!((st.bias_norm - st2.bias_norm).abs() <= 1e-12);
        assert!((st.std_norm - st2.std_norm).abs() <= 1e-12);
    }

    #[test]
    fn bias_norm_decreases_toward_sample_mean() {
        let truth = material(|_, _, _| 0.0);
        let mut s1 = truth.clone();
        let mut s2 = truth.clone();
        for (k, v) in s1.water.data.iter_mut().enumerate() {
            *v = 1.0 + 0.01 * k as f64;
        }
        for (k, v) in s2.water.data.iter_mut().enumerate() {
            *v = 1.2 - 0.01 * k as f64;
        }
        let samples = [s1, s2];
        let p = MetricParams::full_frame();
        // Move truth toward the sample mean: bias must shrink monotonically.
        let mut prev = f64::INFINITY;
        for alpha in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let mut t = truth.clone();
            for (k, v) in t.water.data.iter_mut().enumerate() {
                let mean = (samples[0].water.data[k] + samples[1].water.data[k]) / 2.0;
                *v = alpha * mean;
            }
            let st = ensemble_stats(&samples, &t, &p).unwrap();
            assert!(st.bias_norm <= prev + 1e-12);
            prev = st.bias_norm;
        }
    }

    #[test]
    fn ensemble_requires_two_samples() {
        let truth = material(|_, _, _| 1.0);
        assert!(ensemble_stats(&[truth.clone()], &truth, &MetricParams::default()).is_err());
    }

    #[test]
    fn quality_report_identity() {
        let truth = material(|m, i, j| 0.5 + 0.1 * m as f64 + 0.03 * (i * 8 + j) as f64);
        // 8x8 is below the SSIM window; build a larger image.
        let mut big = MaterialImage::zeros(32, 32, 1.0);
        for m in 0..2 {
            for i in 0..32 {
                for j in 0..32 {
                    big.channel_mut(m).data[i * 32 + j] =
                        0.5 + 0.1 * m as f64 + 0.01 * ((i + j) as f64);
                }
            }
        }
        let _ = truth;
        let rep = quality_report(&big, &big, &MetricParams::default()).unwrap();
        assert_eq!(rep.water.ssim, 1.0);
        assert_eq!(rep.water.psnr_db, f64::INFINITY);
        assert_eq!(rep.calcium.rmse, 0.0);
    }
}
