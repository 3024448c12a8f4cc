//! Tuning run for the conjugate-Gaussian sampler oracle.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use sctk_core::decomposers::{
    jsdps, sdps, JsdpsConfig, JumpstartInit, SdpsConfig, StepSizeSchedule,
};
use sctk_core::diffusion::{standard_schedule, GaussianPriorScore};
use sctk_core::geometry::Geometry;
use sctk_core::image::{ImagePlane, MaterialImage};
use sctk_core::measurement::{LinearizedModel, MeasurementModel};
use sctk_core::nn::Normalization;
use sctk_core::projector::Projector;

const N: usize = 16;
const Q: [[f64; 2]; 2] = [[0.25, 0.35], [0.15, 0.55]];
const SIGMA_P2: f64 = 0.04;
const SIGMA_Z: f64 = 0.5;

struct Oracle {
    meas: LinearizedModel,
    prior: GaussianPriorScore,
    post_mean: Vec<f64>,  // stacked water then calcium
    post_std: Vec<f64>,
}

fn build() -> Oracle {
    let geom = Geometry::desk_small(N, 24, 24);
    let proj = Arc::new(Projector::new(&geom).unwrap());
    let n_rays = geom.n_rays();
    let n_pix = N * N;

    // Prior: smooth mean, isotropic variance.
    let mut mu = MaterialImage::zeros(N, N, 0.8);
    for r in 0..N {
        for c in 0..N {
            let x = c as f64 / N as f64;
            let y = r as f64 / N as f64;
            mu.water.set(r, c, 1.0 + 0.2 * (6.3 * x).sin() * (6.3 * y).cos());
            mu.calcium.set(r, c, 0.3 + 0.1 * (6.3 * (x + y)).cos());
        }
    }
    let var = MaterialImage {
        water: ImagePlane::constant(N, N, SIGMA_P2),
        calcium: ImagePlane::constant(N, N, SIGMA_P2),
        pixel_size_mm: 0.8,
    };
    let prior = GaussianPriorScore::new(mu.clone(), var).unwrap();

    // Ground truth drawn from the prior; data z = F x + eps.
    let mut rng = ChaCha12Rng::seed_from_u64(4242);
    let mut truth = mu.clone();
    for m in 0..2 {
        for v in truth.channel_mut(m).data.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += SIGMA_P2.sqrt() * e;
        }
    }
    let probe = LinearizedModel::new(
        Arc::clone(&proj),
        Q,
        [vec![0.0; n_rays], vec![0.0; n_rays]],
        [vec![1.0; n_rays], vec![1.0; n_rays]],
    )
    .unwrap();
    let mut z = probe.forward(&truth);
    for c in 0..2 {
        for v in z[c].iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += SIGMA_Z * e;
        }
    }
    let w = 1.0 / (SIGMA_Z * SIGMA_Z);
    let meas =
        LinearizedModel::new(Arc::clone(&proj), Q, z.clone(), [vec![w; n_rays], vec![w; n_rays]])
            .unwrap();

    // Dense posterior: F is (2 n_rays) x (2 n_pix).
    use nalgebra::{DMatrix, DVector};
    let mut a_dense = DMatrix::zeros(n_rays, n_pix);
    for j in 0..n_pix {
        let mut e = ImagePlane::zeros(N, N);
        e.data[j] = 1.0;
        let col = proj.project(&e).unwrap();
        for r in 0..n_rays {
            a_dense[(r, j)] = col.data[r];
        }
    }
    let mut f = DMatrix::zeros(2 * n_rays, 2 * n_pix);
    for ch in 0..2 {
        for m in 0..2 {
            for r in 0..n_rays {
                for j in 0..n_pix {
                    f[(ch * n_rays + r, m * n_pix + j)] = Q[ch][m] * a_dense[(r, j)];
                }
            }
        }
    }
    let mut z_stack = DVector::zeros(2 * n_rays);
    for ch in 0..2 {
        for r in 0..n_rays {
            z_stack[ch * n_rays + r] = z[ch][r];
        }
    }
    let mut mu_stack = DVector::zeros(2 * n_pix);
    for m in 0..2 {
        for j in 0..n_pix {
            mu_stack[m * n_pix + j] = mu.channel(m).data[j];
        }
    }
    let prec_prior = 1.0 / SIGMA_P2;
    let ftf = f.transpose() * &f * w;
    let mut prec = ftf;
    for i in 0..2 * n_pix {
        prec[(i, i)] += prec_prior;
    }
    let cov = prec.try_inverse().expect("posterior precision invertible");
    let rhs = f.transpose() * &z_stack * w + mu_stack * prec_prior;
    let post_mean_v = &cov * rhs;
    let post_mean: Vec<f64> = post_mean_v.iter().cloned().collect();
    let post_std: Vec<f64> = (0..2 * n_pix).map(|i| cov[(i, i)].sqrt()).collect();
    Oracle { meas, prior, post_mean, post_std }
}

fn stats(samples: &[MaterialImage], o: &Oracle) -> (f64, f64, f64) {
    let n_pix = N * N;
    let n = samples.len() as f64;
    let mut max_z = 0.0f64;
    let mut covered = 0usize;
    let mut mean_abs_bias_rel = 0.0;
    for m in 0..2 {
        for j in 0..n_pix {
            let idx = m * n_pix + j;
            let vals: Vec<f64> = samples.iter().map(|s| s.channel(m).data[j]).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let err = (mean - o.post_mean[idx]).abs();
            max_z = max_z.max(err / o.post_std[idx]);
            if err <= 2.0 * sd {
                covered += 1;
            }
            mean_abs_bias_rel += err / o.post_std[idx];
        }
    }
    (max_z, covered as f64 / (2 * n_pix) as f64, mean_abs_bias_rel / (2.0 * n_pix as f64))
}

fn main() {
    let o = build();
    let sched = standard_schedule();
    eprintln!("posterior std range: {:.4}..{:.4}",
        o.post_std.iter().cloned().fold(f64::INFINITY, f64::min),
        o.post_std.iter().cloned().fold(0.0, f64::max));

    for eta in [0.3, 1.0, 3.0, 10.0, 30.0] {
        let samples: Vec<MaterialImage> = (0..64)
            .map(|k| {
                let mut cfg = SdpsConfig::new(eta, 9000 + k);
                cfg.norm = Normalization::identity();
                cfg.clamp_output = false;
                sdps(&o.meas, &o.prior, &sched, &cfg).unwrap().estimate
            })
            .collect();
        let (max_z, cover, mean_z) = stats(&samples, &o);
        println!("sdps eta={eta:6.2}: max|z|={max_z:7.3} coverage={cover:.3} mean|z|={mean_z:6.3}");
    }

    for eta in [0.005, 0.02, 0.05, 0.15, 0.5] {
        let samples: Vec<MaterialImage> = (0..64)
            .map(|k| {
                let cfg = JsdpsConfig {
                    t_prime: 150,
                    step: StepSizeSchedule::Constant { eta },
                    grad_approx: true,
                    init: JumpstartInit::Estimate(o.prior.mean().clone()),
                    seed: 9100 + k,
                    norm: Normalization::identity(),
                    clamp_output: false,
                };
                jsdps(&o.meas, &o.prior, &sched, &cfg).unwrap().estimate
            })
            .collect();
        let (max_z, cover, mean_z) = stats(&samples, &o);
        println!("jsdps eta={eta:6.3}: max|z|={max_z:7.3} coverage={cover:.3} mean|z|={mean_z:6.3}");
    }
    let _ = o.meas.fidelity(o.prior.mean()).unwrap();
}
