//! `sctk decompose`: run one of the four algorithms, optionally as an
//! ensemble with derived seeds (base seed + member index).
//!
//! Keys: `algorithm` (image-domain | mbmd | sdps | jsdps), `data.path`
//! (sample sinogram stem), `model.checkpoint` (DPS variants),
//! `mbmd.lambda_water`, `mbmd.lambda_calcium`, `mbmd.iters`, `mbmd.init`,
//! `sdps.eta`, `sdps.sweep`, `truth.path` (for the sweep),
//! `jsdps.t_prime`, `jsdps.eta`, `jsdps.grad_approx`, `ensemble.size`,
//! `clamp`, `seed`, `out_dir`.

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use rayon::prelude::*;
use sctk_core::decomposers::{
    image_domain_decomposition, jsdps, mbmd, sdps, DecompositionResult, ImageDomainConfig,
    JsdpsConfig, JumpstartInit, MbmdConfig, SdpsConfig, StepSizeSchedule,
};
use sctk_core::io::{read_material_image, write_material_image, write_trace_csv, Metadata};
use sctk_core::measurement::SpectralMeasurement;
use sctk_core::nn::load_checkpoint;
use sctk_core::projector::Projector;
use sctk_core::spectral::SpectralOperator;

use crate::commands::{geometry_from_metadata, read_sinogram, system_from_metadata};
use crate::config::Config;

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    ImageDomain,
    Mbmd,
    Sdps,
    Jsdps,
}

impl Algorithm {
    fn name(&self) -> &'static str {
        match self {
            Algorithm::ImageDomain => "image-domain",
            Algorithm::Mbmd => "mbmd",
            Algorithm::Sdps => "sdps",
            Algorithm::Jsdps => "jsdps",
        }
    }
}

pub struct Args {
    algorithm: Algorithm,
    data: PathBuf,
    checkpoint: Option<PathBuf>,
    truth: Option<PathBuf>,
    mbmd_lambda_w: f64,
    mbmd_lambda_c: f64,
    mbmd_iters: usize,
    mbmd_imgdom_init: bool,
    sdps_eta: f64,
    sdps_sweep: bool,
    jsdps_t_prime: usize,
    jsdps_eta: f64,
    jsdps_grad_approx: bool,
    ensemble: usize,
    clamp: bool,
    seed: u64,
    out_dir: PathBuf,
}

pub fn parse(cfg: &mut Config) -> Option<Args> {
    let algorithm = match cfg.require_str("algorithm").as_str() {
        "image-domain" => Some(Algorithm::ImageDomain),
        "mbmd" => Some(Algorithm::Mbmd),
        "sdps" => Some(Algorithm::Sdps),
        "jsdps" => Some(Algorithm::Jsdps),
        "" => None,
        other => {
            cfg.error(format!(
                "algorithm: expected image-domain|mbmd|sdps|jsdps, got `{other}`"
            ));
            None
        }
    };
    let args = Args {
        algorithm: algorithm?,
        data: cfg.require_path("data.path"),
        checkpoint: cfg.opt_path("model.checkpoint"),
        truth: cfg.opt_path("truth.path"),
        mbmd_lambda_w: cfg.parse_or("mbmd.lambda_water", 1e-4),
        mbmd_lambda_c: cfg.parse_or("mbmd.lambda_calcium", 4e-4),
        mbmd_iters: cfg.parse_or("mbmd.iters", 2000),
        mbmd_imgdom_init: cfg.parse_bool_or("mbmd.init_image_domain", false),
        sdps_eta: cfg.parse_or("sdps.eta", 1.0),
        sdps_sweep: cfg.parse_bool_or("sdps.sweep", false),
        jsdps_t_prime: cfg.parse_or("jsdps.t_prime", 150),
        jsdps_eta: cfg.parse_or("jsdps.eta", 0.02),
        jsdps_grad_approx: cfg.parse_bool_or("jsdps.grad_approx", true),
        ensemble: cfg.parse_or("ensemble.size", 1),
        clamp: cfg.parse_bool_or("clamp", true),
        seed: cfg.require_parse("seed"),
        out_dir: cfg.require_path("out_dir"),
    };
    if args.ensemble < 1 {
        cfg.error("ensemble.size must be at least 1");
    }
    if matches!(args.algorithm, Algorithm::Sdps | Algorithm::Jsdps) && args.checkpoint.is_none() {
        cfg.error("model.checkpoint is required for sdps/jsdps");
    }
    if args.sdps_sweep && args.truth.is_none() {
        cfg.error("sdps.sweep requires truth.path (sweep picks minimal MSE vs ground truth)");
    }
    Some(args)
}

fn mse(a: &sctk_core::image::MaterialImage, b: &sctk_core::image::MaterialImage) -> f64 {
    a.sq_distance(b) / (2 * a.height() * a.width()) as f64
}

pub fn run(args: &Args) -> Result<()> {
    let (sino, meta) = read_sinogram(&args.data)
        .with_context(|| format!("loading sinogram {}", args.data.display()))?;
    let geom = geometry_from_metadata(&meta, &args.data)?;
    let sys = system_from_metadata(&meta, &args.data)?;
    let proj = Arc::new(Projector::new(&geom)?);
    let op = Arc::new(SpectralOperator::new(sys, Arc::clone(&proj))?);

    let algo_dir = args.out_dir.join(args.algorithm.name());
    std::fs::create_dir_all(&algo_dir)?;

    let mut manifest = Metadata::new();
    manifest.set("algorithm", args.algorithm.name());
    manifest.set("data", args.data.display());
    manifest.set("base_seed", args.seed);
    manifest.set("ensemble_size", args.ensemble);
    manifest.set("clamp", args.clamp);

    let results: Vec<DecompositionResult> = match args.algorithm {
        Algorithm::ImageDomain => {
            let started = std::time::Instant::now();
            let mut est = image_domain_decomposition(&sino, &op, &ImageDomainConfig::default())?;
            if args.clamp {
                est.clamp_non_negative();
            }
            vec![DecompositionResult {
                estimate: est,
                iterations: 0,
                wall_time_s: started.elapsed().as_secs_f64(),
                trace: Vec::new(),
                algorithm: "image-domain".into(),
                config_echo: format!("filter=hann clamp={}", args.clamp),
            }]
        }
        Algorithm::Mbmd => {
            let init = if args.mbmd_imgdom_init {
                Some(image_domain_decomposition(&sino, &op, &ImageDomainConfig::default())?)
            } else {
                None
            };
            manifest.set("mbmd.lambda_water", args.mbmd_lambda_w);
            manifest.set("mbmd.lambda_calcium", args.mbmd_lambda_c);
            manifest.set("mbmd.iters", args.mbmd_iters);
            let cfg = MbmdConfig {
                lambda_water: args.mbmd_lambda_w,
                lambda_calcium: args.mbmd_lambda_c,
                n_iter: args.mbmd_iters,
                init,
                clamp_output: args.clamp,
            };
            vec![mbmd(&sino, &op, &cfg)?]
        }
        Algorithm::Sdps => {
            let ckpt = load_checkpoint(args.checkpoint.as_ref().unwrap())?;
            let meas = SpectralMeasurement::new(Arc::clone(&op), sino.clone());
            let eta = if args.sdps_sweep {
                let (truth, _) = read_material_image(args.truth.as_ref().unwrap())?;
                let grid: Vec<f64> =
                    (0..7).map(|i| 0.1 * 10f64.powf(i as f64 / 3.0)).collect();
                let mut best = (f64::INFINITY, grid[0]);
                let mut sweep_log = String::new();
                for &eta in &grid {
                    let mut c = SdpsConfig::new(eta, args.seed);
                    c.norm = ckpt.norm;
                    c.clamp_output = args.clamp;
                    let r = sdps(&meas, &ckpt.state.net, &ckpt.sched, &c)?;
                    let m = mse(&r.estimate, &truth);
                    sweep_log.push_str(&format!("{eta:.4}:{m:.6e} "));
                    if m < best.0 {
                        best = (m, eta);
                    }
                }
                manifest.set("sdps.sweep_grid", sweep_log.trim());
                manifest.set("sdps.eta_chosen", best.1);
                best.1
            } else {
                args.sdps_eta
            };
            manifest.set("sdps.eta", eta);
            manifest.set("steps", ckpt.sched.t_steps);
            let members: Vec<Result<DecompositionResult>> = (0..args.ensemble)
                .into_par_iter()
                .map(|k| {
                    let mut c = SdpsConfig::new(eta, args.seed + k as u64);
                    c.norm = ckpt.norm;
                    c.clamp_output = args.clamp;
                    Ok(sdps(&meas, &ckpt.state.net, &ckpt.sched, &c)?)
                })
                .collect();
            members.into_iter().collect::<Result<Vec<_>>>()?
        }
        Algorithm::Jsdps => {
            let ckpt = load_checkpoint(args.checkpoint.as_ref().unwrap())?;
            let meas = SpectralMeasurement::new(Arc::clone(&op), sino.clone());
            let first_pass =
                image_domain_decomposition(&sino, &op, &ImageDomainConfig::default())?;
            manifest.set("jsdps.t_prime", args.jsdps_t_prime);
            manifest.set("jsdps.eta", args.jsdps_eta);
            manifest.set("jsdps.grad_approx", args.jsdps_grad_approx);
            manifest.set("steps", args.jsdps_t_prime);
            let members: Vec<Result<DecompositionResult>> = (0..args.ensemble)
                .into_par_iter()
                .map(|k| {
                    let cfg = JsdpsConfig {
                        t_prime: args.jsdps_t_prime,
                        step: StepSizeSchedule::Constant { eta: args.jsdps_eta },
                        grad_approx: args.jsdps_grad_approx,
                        init: JumpstartInit::Estimate(first_pass.clone()),
                        seed: args.seed + k as u64,
                        norm: ckpt.norm,
                        clamp_output: args.clamp,
                    };
                    Ok(jsdps(&meas, &ckpt.state.net, &ckpt.sched, &cfg)?)
                })
                .collect();
            members.into_iter().collect::<Result<Vec<_>>>()?
        }
    };

    let mut total_wall = 0.0;
    for (k, r) in results.iter().enumerate() {
        r.validate()?;
        total_wall += r.wall_time_s;
        let stem = algo_dir.join(format!("member_{k:04}"));
        let mut m = Metadata::new();
        m.set("algorithm", &r.algorithm);
        m.set("seed", args.seed + k as u64);
        m.set("iterations", r.iterations);
        m.set("wall_time_s", format!("{:.6}", r.wall_time_s));
        m.set("config", &r.config_echo);
        m.set("clamped", args.clamp);
        write_material_image(&stem, &r.estimate, &m)?;
        if !r.trace.is_empty() {
            let header = if r.algorithm == "mbmd" { "objective" } else { "step_size" };
            write_trace_csv(&algo_dir.join(format!("member_{k:04}_trace.csv")), header, &r.trace)?;
        }
        manifest.set(
            &format!("member_{k:04}"),
            format!(
                "seed={} iterations={} wall_time_s={:.6}",
                args.seed + k as u64,
                r.iterations,
                r.wall_time_s
            ),
        );
    }
    manifest.set("total_wall_time_s", format!("{total_wall:.6}"));
    manifest.set("config_echo", &results[0].config_echo);
    sctk_core::io::write_atomic(
        &algo_dir.join("run_manifest.txt"),
        manifest.to_text().as_bytes(),
    )?;
    println!(
        "{}: {} member(s), total algorithm wall time {:.3} s, outputs in {}",
        args.algorithm.name(),
        results.len(),
        total_wall,
        algo_dir.display()
    );
    Ok(())
}
