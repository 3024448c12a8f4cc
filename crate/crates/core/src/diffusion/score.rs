//! Noise-prediction models.
//!
//! A [`ScoreModel`] maps (x_t, t) to the predicted noise eps. Conditional
//! samplers additionally require the vector-Jacobian product of the
//! prediction so the likelihood gradient can be chained through the model.

use crate::image::MaterialImage;

use super::DiffusionSchedule;

/// Deferred vector-Jacobian product, reusing the forward pass when the
/// implementation supports it.
pub type VjpClosure<'a> = Box<dyn FnOnce(&MaterialImage) -> MaterialImage + Send + 'a>;

pub trait ScoreModel: Sync {
    /// Predicted noise for `x_t` at step `t` (1-based). Output shape must
    /// equal the input shape; deterministic in inference mode.
    fn predict(&self, x_t: &MaterialImage, t: usize, sched: &DiffusionSchedule) -> MaterialImage;

    /// Vector-Jacobian product `(d eps / d x_t)^T cot`.
    fn vjp(
        &self,
        x_t: &MaterialImage,
        t: usize,
        sched: &DiffusionSchedule,
        cotangent: &MaterialImage,
    ) -> MaterialImage;

    /// Prediction plus a closure computing the VJP at the same point.
    fn predict_with_vjp<'a>(
        &'a self,
        x_t: &MaterialImage,
        t: usize,
        sched: &'a DiffusionSchedule,
    ) -> (MaterialImage, VjpClosure<'a>) {
        let pred = self.predict(x_t, t, sched);
        let x = x_t.clone();
        (pred, Box::new(move |cot| self.vjp(&x, t, sched, cot)))
    }
}

/// Exact noise predictor for a Gaussian prior x_0 ~ N(mu, Sigma) with
/// diagonal covariance. The diffused marginal at step t is
/// N(sqrt(abar_t) mu, abar_t Sigma + (1-abar_t) I), whose score converts to
/// eps = sqrt(1-abar_t) (x_t - sqrt(abar_t) mu) / (abar_t Sigma + 1-abar_t).
/// Used as a closed-form oracle for every sampler statistic.
#[derive(Debug, Clone)]
pub struct GaussianPriorScore {
    mean: MaterialImage,
    variance: MaterialImage,
}

impl GaussianPriorScore {
    pub fn new(mean: MaterialImage, variance: MaterialImage) -> crate::Result<Self> {
        if !mean.same_shape(&variance) {
            return Err(crate::CoreError::ShapeMismatch(
                "prior mean and variance shapes differ".into(),
            ));
        }
        for m in 0..2 {
            if variance.channel(m).data.iter().any(|&v| v <= 0.0) {
                return Err(crate::CoreError::InvalidInput(
                    "prior variance must be positive".into(),
                ));
            }
        }
        Ok(Self { mean, variance })
    }

    pub fn mean(&self) -> &MaterialImage {
        &self.mean
    }

    pub fn variance(&self) -> &MaterialImage {
        &self.variance
    }
}

impl ScoreModel for GaussianPriorScore {
    fn predict(&self, x_t: &MaterialImage, t: usize, sched: &DiffusionSchedule) -> MaterialImage {
        let abar = sched.alpha_bar_t(t);
        let root = (1.0 - abar).sqrt();
        let mut out = x_t.clone();
        for m in 0..2 {
            let mu = &self.mean.channel(m).data;
            let var = &self.variance.channel(m).data;
            for (j, v) in out.channel_mut(m).data.iter_mut().enumerate() {
                let marginal_var = abar * var[j] + (1.0 - abar);
                *v = root * (*v - abar.sqrt() * mu[j]) / marginal_var;
            }
        }
        out
    }

    fn vjp(
        &self,
        _x_t: &MaterialImage,
        t: usize,
        sched: &DiffusionSchedule,
        cotangent: &MaterialImage,
    ) -> MaterialImage {
        // The prediction is affine in x_t with a diagonal Jacobian.
        let abar = sched.alpha_bar_t(t);
        let root = (1.0 - abar).sqrt();
        let mut out = cotangent.clone();
        for m in 0..2 {
            let var = &self.variance.channel(m).data;
            for (j, v) in out.channel_mut(m).data.iter_mut().enumerate() {
                *v *= root / (abar * var[j] + (1.0 - abar));
            }
        }
        out
    }
}
