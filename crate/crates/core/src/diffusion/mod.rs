//! DDPM machinery: the discrete variance schedule, forward perturbation,
//! one-step denoised prediction, and the stochastic ancestral update.
//!
//! The reverse update follows
//! x_{t-1} = sqrt(alpha_t)(1-abar_{t-1})/(1-abar_t) x_t
//!         + sqrt(abar_{t-1}) beta_t/(1-abar_t) xhat_0 + sigma_t z
//! with sigma_t^2 the DDPM posterior variance and sigma_1 = 0.

pub mod score;

pub use score::{GaussianPriorScore, ScoreModel};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CoreError, Result};
use crate::image::MaterialImage;

/// Discrete noise schedule for `t = 1..=T` (index 0 holds t = 1).
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    pub t_steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// DDPM posterior standard deviation; sigma[0] (t = 1) is zero.
    pub sigma: Vec<f64>,
}

impl DiffusionSchedule {
    #[inline]
    pub fn beta_t(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    #[inline]
    pub fn alpha_t(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    #[inline]
    pub fn alpha_bar_t(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// abar_{t-1} with the convention abar_0 = 1.
    #[inline]
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t >= 2 {
            self.alpha_bar[t - 2]
        } else {
            1.0
        }
    }

    #[inline]
    pub fn sigma_t(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_steps {
            return Err(CoreError::InvalidInput(format!(
                "step {t} outside 1..={}",
                self.t_steps
            )));
        }
        Ok(())
    }
}

/// Linear beta schedule: beta_t = beta1 + (t-1)(betaT - beta1)/(T-1).
pub fn make_schedule(t_steps: usize, beta1: f64, beta_t: f64) -> Result<DiffusionSchedule> {
    if t_steps < 2 {
        return Err(CoreError::InvalidConfig("schedule needs T >= 2".into()));
    }
    if !(0.0 < beta1 && beta1 < beta_t && beta_t < 1.0) {
        return Err(CoreError::InvalidConfig(
            "schedule requires 0 < beta1 < betaT < 1".into(),
        ));
    }
    let mut beta = Vec::with_capacity(t_steps);
    let mut alpha = Vec::with_capacity(t_steps);
    let mut alpha_bar = Vec::with_capacity(t_steps);
    let mut sigma = Vec::with_capacity(t_steps);
    let mut abar = 1.0f64;
    for i in 0..t_steps {
        let b = beta1 + i as f64 * (beta_t - beta1) / (t_steps - 1) as f64;
        let a = 1.0 - b;
        let abar_prev = abar;
        abar *= a;
        beta.push(b);
        alpha.push(a);
        alpha_bar.push(abar);
        let s2 = if i == 0 { 0.0 } else { (1.0 - abar_prev) / (1.0 - abar) * b };
        sigma.push(s2.sqrt());
    }
    Ok(DiffusionSchedule { t_steps, beta, alpha, alpha_bar, sigma })
}

/// The standard schedule: T = 1000, beta from 1e-4 to 0.02.
pub fn standard_schedule() -> DiffusionSchedule {
    make_schedule(1000, 1e-4, 0.02).unwrap()
}

/// Standard-normal image with a fixed draw order (water plane then calcium,
/// row-major).
pub fn standard_normal_image(
    height: usize,
    width: usize,
    pixel_size_mm: f64,
    rng: &mut ChaCha12Rng,
) -> MaterialImage {
    let mut img = MaterialImage::zeros(height, width, pixel_size_mm);
    for v in img.water.data.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    for v in img.calcium.data.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    img
}

/// Forward perturbation x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps.
pub fn forward_diffuse(
    x0: &MaterialImage,
    t: usize,
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<MaterialImage> {
    sched.check_t(t)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let eps = standard_normal_image(x0.height(), x0.width(), x0.pixel_size_mm, &mut rng);
    Ok(diffuse_with_noise(x0, t, sched, &eps))
}

/// Forwardperturbation with caller-provided noise.
pub fn diffuse_with_noise(
    x0: &MaterialImage,
    t: usize,
    sched: &DiffusionSchedule,
    eps: &MaterialImage,
) -> MaterialImage {
    let abar = sched.alpha_bar_t(t);
    let (ca, cb) = (abar.sqrt(), (1.0 - abar).sqrt());
    let mut out = x0.clone();
    out.scale(ca);
    out.axpy(cb, eps);
    out
}

/// One-step denoised prediction
/// xhat_0 = (x_t - sqrt(1 - abar_t) eps_theta(x_t, t)) / sqrt(abar_t).
pub fn predict_x0(
    x_t: &MaterialImage,
    t: usize,
    model: &dyn ScoreModel,
    sched: &DiffusionSchedule,
) -> Result<MaterialImage> {
    sched.check_t(t)?;
    let eps = model.predict(x_t, t, sched);
    if !eps.same_shape(x_t) {
        return Err(CoreError::ShapeMismatch(format!(
            "model output {}x{} vs input {}x{}",
            eps.height(),
            eps.width(),
            x_t.height(),
            x_t.width()
        )));
    }
    let abar = sched.alpha_bar_t(t);
    let mut out = x_t.clone();
    out.axpy(-(1.0 - abar).sqrt(), &eps);
    out.scale(1.0 / abar.sqrt());
    Ok(out)
}

/// Ancestral reverse step with caller-provided unit noise `z`. The noise
/// term is suppressed at t = 1 (sigma_1 = 0).
pub fn ancestral_step_with_noise(
    x_t: &MaterialImage,
    x_hat0: &MaterialImage,
    t: usize,
    sched: &DiffusionSchedule,
    z: &MaterialImage,
) -> MaterialImage {
    let abar = sched.alpha_bar_t(t);
    let abar_prev = sched.alpha_bar_prev(t);
    let beta = sched.beta_t(t);
    let alpha = sched.alpha_t(t);
    let c_xt = alpha.sqrt() * (1.0 - abar_prev) / (1.0 - abar);
    let c_x0 = abar_prev.sqrt() * beta / (1.0 - abar);
    let sigma = sched.sigma_t(t);
    let mut out = x_t.clone();
    out.scale(c_xt);
    out.axpy(c_x0, x_hat0);
    if sigma > 0.0 {
        out.axpy(sigma, z);
    }
    out
}

/// Seeded ancestral step.
pub fn ancestral_step(
    x_t: &MaterialImage,
    x_hat0: &MaterialImage,
    t: usize,
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<MaterialImage> {
    sched.check_t(t)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let z = standard_normal_image(x_t.height(), x_t.width(), x_t.pixel_size_mm, &mut rng);
    Ok(ancestral_step_with_noise(x_t, x_hat0, t, sched, &z))
}

/// Unconditional reverse chain from pure noise. The RNG consumption order
/// (initial x_T, then one z per step) is the contract that conditional
/// samplers with a zero step size must reproduce bit-for-bit.
pub fn sample_unconditional(
    model: &dyn ScoreModel,
    sched: &DiffusionSchedule,
    height: usize,
    width: usize,
    pixel_size_mm: f64,
    seed: u64,
) -> Result<MaterialImage> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut x = standard_normal_image(height, width, pixel_size_mm, &mut rng);
    for t in (1..=sched.t_steps).rev() {
        let x_hat0 = predict_x0(&x, t, model, sched)?;
        let z = standard_normal_image(height, width, pixel_size_mm, &mut rng);
        x = ancestral_step_with_noise(&x, &x_hat0, t, sched, &z);
    }
    Ok(x)
}
