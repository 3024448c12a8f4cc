//! Denoiser training: noise-prediction regression over a phantom dataset.
//!
//! Every optimizer step is a pure function of (seed, step index), so an
//! interrupted run resumed from a checkpoint continues the exact same
//! sample stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::diffusion::DiffusionSchedule;
use crate::error::{CoreError, Result};
use crate::image::MaterialImage;

use super::adam::AdamState;
use super::tensor::Tensor;
use super::unet::{material_to_tensor, DenoiserNet};

/// Per-channel scale dividing physical densities into network units.
/// Stored with every checkpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub water_scale: f64,
    pub calcium_scale: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self { water_scale: 2.0, calcium_scale: 2.0 }
    }
}

impl Normalization {
    /// Identity scaling, used when a sampler operates directly in
    /// physical units (e.g. with the analytic Gaussian score).
    pub fn identity() -> Self {
        Self { water_scale: 1.0, calcium_scale: 1.0 }
    }

    pub fn normalize(&self, img: &MaterialImage) -> MaterialImage {
        let mut out = img.clone();
        out.water.scale(1.0 / self.water_scale);
        out.calcium.scale(1.0 / self.calcium_scale);
        out
    }

    pub fn denormalize(&self, img: &MaterialImage) -> MaterialImage {
        let mut out = img.clone();
        out.water.scale(self.water_scale);
        out.calcium.scale(self.calcium_scale);
        out
    }

    /// Chain rule for gradients taken in physical units but applied in
    /// normalized units: d/dx_norm = scale * d/dx_phys.
    pub fn gradient_to_normalized(&self, grad_phys: &MaterialImage) -> MaterialImage {
        let mut out = grad_phys.clone();
        out.water.scale(self.water_scale);
        out.calcium.scale(self.calcium_scale);
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Total optimizer steps to run.
    pub steps: usize,
    /// Random square crop edge; images smaller than this are rejected.
    pub crop: Option<usize>,
    pub seed: u64,
    pub norm: Normalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-4,
            steps: 300,
            crop: None,
            seed: 0,
            norm: Normalization::default(),
        }
    }
}

/// Network plus optimizer state; checkpointable mid-run.
pub struct TrainState {
    pub net: DenoiserNet,
    pub adam: AdamState,
    pub step: u64,
}

impl TrainState {
    pub fn new(net: DenoiserNet) -> Self {
        let n = net.n_params();
        Self { net, adam: AdamState::new(n), step: 0 }
    }
}

fn mix_seed(seed: u64, step: u64, sample: u64) -> u64 {
    // splitmix-style mixing of (seed, step, sample).
    let mut z = seed
        .wrapping_add(step.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(sample.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct SampleJob {
    image_idx: usize,
    crop_row: usize,
    crop_col: usize,
    t: usize,
    noise_seed: u64,
}

fn crop_tensor(img: &MaterialImage, norm: &Normalization, r0: usize, c0: usize, size: usize) -> Tensor {
    let mut t = Tensor::zeros(2, size, size);
    let w = img.width();
    for (m, scale) in [(0usize, norm.water_scale), (1usize, norm.calcium_scale)] {
        let src = &img.channel(m).data;
        let dst = t.plane_mut(m);
        for r in 0..size {
            for c in 0..size {
                dst[r * size + c] = (src[(r0 + r) * w + c0 + c] / scale) as f32;
            }
        }
    }
    t
}

/// One training step: batched noise-prediction loss and an Adam update.
/// Returns the batch loss (per 2-channel pixel).
fn train_step(
    state: &mut TrainState,
    dataset: &[MaterialImage],
    sched: &DiffusionSchedule,
    cfg: &TrainConfig,
) -> Result<f64> {
    let step = state.step;
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, step, u64::MAX));
    let crop = cfg.crop.unwrap_or_else(|| dataset[0].height().min(dataset[0].width()));
    let jobs: Vec<SampleJob> = (0..cfg.batch_size)
        .map(|i| {
            let image_idx = rng.gen_range(0..dataset.len());
            let img = &dataset[image_idx];
            let crop_row = if img.height() > crop { rng.gen_range(0..=img.height() - crop) } else { 0 };
            let crop_col = if img.width() > crop { rng.gen_range(0..=img.width() - crop) } else { 0 };
            let t = rng.gen_range(1..=sched.t_steps);
            SampleJob { image_idx, crop_row, crop_col, t, noise_seed: mix_seed(cfg.seed, step, i as u64) }
        })
        .collect();

    let net = &state.net;
    let results: Vec<(f64, Vec<f32>)> = jobs
        .par_iter()
        .map(|job| {
            let img = &dataset[job.image_idx];
            let x0 = crop_tensor(img, &cfg.norm, job.crop_row, job.crop_col, crop);
            let mut nrng = ChaCha12Rng::seed_from_u64(job.noise_seed);
            let mut eps = Tensor::zeros(2, crop, crop);
            for v in eps.data.iter_mut() {
                *v = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut nrng) as f32;
            }
            let abar = sched.alpha_bar_t(job.t);
            let (ca, cb) = ((abar.sqrt()) as f32, ((1.0 - abar).sqrt()) as f32);
            let mut x_t = x0;
            for (x, e) in x_t.data.iter_mut().zip(eps.data.iter()) {
                *x = ca * *x + cb * e;
            }
            let (out, cache) = net.forward(&x_t, job.t);
            let n_pix = (crop * crop) as f64;
            let mut loss = 0.0f64;
            let mut dout = Tensor::zeros(2, crop, crop);
            for j in 0..out.data.len() {
                let d = (out.data[j] - eps.data[j]) as f64;
                loss += d * d;
                dout.data[j] = (2.0 * d / (n_pix * cfg.batch_size as f64)) as f32;
            }
            let mut grads = vec![0.0f32; net.n_params()];
            net.backward(&cache, &dout, Some(&mut grads));
            (loss / n_pix, grads)
        })
        .collect();

    let mut grads = vec![0.0f32; state.net.n_params()];
    let mut loss = 0.0;
    for (l, g) in &results {
        loss += l;
        for (acc, v) in grads.iter_mut().zip(g.iter()) {
            *acc += v;
        }
    }
    loss /= cfg.batch_size as f64;
    if !loss.is_finite() {
        return Err(CoreError::Numerical(format!(
            "training diverged (loss {loss}) at step {step}"
        )));
    }
    state.adam.update(state.net.params_mut(), &grads, cfg.learning_rate);
    state.step += 1;
    Ok(loss)
}

/// Run `cfg.steps` optimizer steps from the current state, appending to the
/// loss trace. Dataset images must share a common shape at least as large
/// as the crop.
pub fn train_denoiser(
    state: &mut TrainState,
    dataset: &[MaterialImage],
    sched: &DiffusionSchedule,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(CoreError::InvalidInput("empty training dataset".into()));
    }
    let shape = (dataset[0].height(), dataset[0].width());
    for img in dataset {
        if (img.height(), img.width()) != shape {
            return Err(CoreError::ShapeMismatch(
                "training images must share a common shape".into(),
            ));
        }
    }
    let crop = cfg.crop.unwrap_or(shape.0.min(shape.1));
    if crop > shape.0 || crop > shape.1 {
        return Err(CoreError::InvalidConfig(format!(
            "crop {crop} exceeds image shape {}x{}",
            shape.0, shape.1
        )));
    }
    super::unet::check_net_shape(state.net.config(), crop, crop)?;
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        trace.push(train_step(state, dataset, sched, cfg)?);
    }
    Ok(trace)
}

/// Deterministic evaluation loss on a fixed (seeded) set of noise/step
/// draws; used to compare models before and after training.
pub fn eval_loss(
    net: &DenoiserNet,
    dataset: &[MaterialImage],
    sched: &DiffusionSchedule,
    norm: &Normalization,
    seed: u64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(CoreError::InvalidInput("empty evaluation dataset".into()));
    }
    let losses: Vec<f64> = dataset
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, 0, i as u64));
            let x0 = material_to_tensor(&norm.normalize(img));
            let mut eps = Tensor::zeros(2, x0.h, x0.w);
            for v in eps.data.iter_mut() {
                *v = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) as f32;
            }
            let t = rng.gen_range(1..=sched.t_steps);
            let abar = sched.alpha_bar_t(t);
            let (ca, cb) = ((abar.sqrt()) as f32, ((1.0 - abar).sqrt()) as f32);
            let mut x_t = x0;
            for (x, e) in x_t.data.iter_mut().zip(eps.data.iter()) {
                *x = ca * *x + cb * e;
            }
            let out = net.predict_tensor(&x_t, t);
            let mut loss = 0.0f64;
            for j in 0..out.data.len() {
                let d = (out.data[j] - eps.data[j]) as f64;
                loss += d * d;
            }
            loss / (x_t.h * x_t.w) as f64
        })
        .collect();
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use crate::nn::unet::NetConfig;
    use crate::phantoms::{synth_phantom, PhantomRecipe, PhantomSpec};

    fn tiny_dataset(n: usize, size: usize) -> Vec<MaterialImage> {
        (0..n)
            .map(|i| {
                let spec = PhantomSpec::new(PhantomRecipe::RandomBlobs, size, 0.8);
                synth_phantom(100 + i as u64, &spec).unwrap()
            })
            .collect()
    }

    #[test]
    fn untrained_loss_near_two_per_pixel_pair() {
        let net = DenoiserNet::new(NetConfig::tiny(), 1);
        let dataset = tiny_dataset(8, 16);
        let sched = make_schedule(100, 1e-4, 0.02).unwrap();
        let loss = eval_loss(&net, &dataset, &sched, &Normalization::default(), 3).unwrap();
        assert!((1.5..2.5).contains(&loss), "untrained loss {loss}");
    }

    #[test]
    fn first_batch_loss_is_reproducible() {
        let sched = make_schedule(100, 1e-4, 0.02).unwrap();
        let dataset = tiny_dataset(4, 16);
        let cfg = TrainConfig { batch_size: 4, steps: 1, seed: 11, ..Default::default() };
        let run = || {
            let mut state = TrainState::new(DenoiserNet::new(NetConfig::tiny(), 5));
            train_denoiser(&mut state, &dataset, &sched, &cfg).unwrap()[0]
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn short_training_reduces_loss() {
        let sched = make_schedule(100, 1e-4, 0.02).unwrap();
        let dataset = tiny_dataset(8, 16);
        let mut state = TrainState::new(DenoiserNet::new(NetConfig::tiny(), 5));
        let norm = Normalization::default();
        let before = eval_loss(&state.net, &dataset, &sched, &norm, 42).unwrap();
        let cfg = TrainConfig {
            batch_size: 8,
            steps: 60,
            learning_rate: 1e-3,
            seed: 7,
            ..Default::default()
        };
        train_denoiser(&mut state, &dataset, &sched, &cfg).unwrap();
        let after = eval_loss(&state.net, &dataset, &sched, &norm, 42).unwrap();
        assert!(after < before, "loss {before} -> {after}");
    }

    #[test]
    fn empty_dataset_rejected() {
        let sched = make_schedule(100, 1e-4, 0.02).unwrap();
        let mut state = TrainState::new(DenoiserNet::new(NetConfig::tiny(), 5));
        let cfg = TrainConfig::default();
        assert!(train_denoiser(&mut state, &[], &sched, &cfg).is_err());
    }

    #[test]
    fn resume_continues_the_same_stream() {
        // 4 steps in one run vs 2 + 2 with a state handoff: identical params.
        let sched = make_schedule(100, 1e-4, 0.02).unwrap();
        let dataset = tiny_dataset(4, 16);
        let mk_cfg = |steps: usize| TrainConfig {
            batch_size: 2,
            steps,
            seed: 9,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let mut a = TrainState::new(DenoiserNet::new(NetConfig::tiny(), 5));
        train_denoiser(&mut a, &dataset, &sched, &mk_cfg(4)).unwrap();
        let mut b = TrainState::new(DenoiserNet::new(NetConfig::tiny(), 5));
        train_denoiser(&mut b, &dataset, &sched, &mk_cfg(2)).unwrap();
        train_denoiser(&mut b, &dataset, &sched, &mk_cfg(2)).unwrap();
        assert_eq!(a.net.params(), b.net.params());
        assert_eq!(a.step, b.step);
    }
}
