//! `sctk train`: denoiser training over a directory of material images.
//!
//! Keys: `train.dataset_dir`, `train.steps` (or `train.epochs`),
//! `train.batch`, `train.lr`, `train.crop`, `train.resume_from`,
//! `net.base_width`, `net.levels`, `net.temb_dim`,
//! `sched.t`, `sched.beta1`, `sched.beta_t`, `seed`, `out_dir`.
//! Writes `denoiser.ckpt` (with optimizer state for resuming) and
//! `loss_trace.csv`.

use std::path::PathBuf;

use anyhow::{Context, Result};
use sctk_core::diffusion::make_schedule;
use sctk_core::io::{read_material_image, write_trace_csv};
use sctk_core::nn::{
    load_checkpoint, save_checkpoint, train_denoiser, DenoiserNet, NetConfig, Normalization,
    TrainConfig, TrainState,
};

use crate::config::Config;

pub struct Args {
    dataset_dir: PathBuf,
    steps: Option<usize>,
    epochs: Option<usize>,
    batch: usize,
    lr: f64,
    crop: Option<usize>,
    resume_from: Option<PathBuf>,
    net: NetConfig,
    sched_t: usize,
    beta1: f64,
    beta_t: f64,
    seed: u64,
    out_dir: PathBuf,
}

pub fn parse(cfg: &mut Config) -> Option<Args> {
    let levels: usize = cfg.parse_or("net.levels", 3);
    if levels < 2 {
        cfg.error("net.levels must be at least 2");
    }
    let args = Args {
        dataset_dir: cfg.require_path("train.dataset_dir"),
        steps: cfg.opt_parse("train.steps"),
        epochs: cfg.opt_parse("train.epochs"),
        batch: cfg.parse_or("train.batch", 16),
        lr: cfg.parse_or("train.lr", 1e-4),
        crop: cfg.opt_parse("train.crop"),
        resume_from: cfg.opt_path("train.resume_from"),
        net: NetConfig {
            in_channels: 2,
            base_width: cfg.parse_or("net.base_width", 32),
            level_mults: (0..levels).map(|l| 1 << l.min(2)).collect(),
            temb_dim: cfg.parse_or("net.temb_dim", 128),
        },
        sched_t: cfg.parse_or("sched.t", 1000),
        beta1: cfg.parse_or("sched.beta1", 1e-4),
        beta_t: cfg.parse_or("sched.beta_t", 0.02),
        seed: cfg.require_parse("seed"),
        out_dir: cfg.require_path("out_dir"),
    };
    if args.steps.is_none() && args.epochs.is_none() {
        cfg.error("one of train.steps or train.epochs is required");
    }
    Some(args)
}

pub fn run(args: &Args) -> Result<()> {
    let mut images = Vec::new();
    let entries = std::fs::read_dir(&args.dataset_dir)
        .with_context(|| format!("dataset directory {}", args.dataset_dir.display()))?;
    let mut stems: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "bin").unwrap_or(false))
        .collect();
    stems.sort();
    for stem in &stems {
        let (img, _) = read_material_image(&stem.with_extension(""))?;
        images.push(img);
    }
    anyhow::ensure!(
        !images.is_empty(),
        "no material images (*.bin) found in {}",
        args.dataset_dir.display()
    );

    let sched = make_schedule(args.sched_t, args.beta1, args.beta_t)?;
    let norm = Normalization::default();
    let mut state = match &args.resume_from {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            anyhow::ensure!(
                ckpt.sched.t_steps == sched.t_steps,
                "checkpoint schedule T={} != configured T={}",
                ckpt.sched.t_steps,
                sched.t_steps
            );
            println!("resuming from {} at step {}", path.display(), ckpt.state.step);
            ckpt.state
        }
        None => TrainState::new(DenoiserNet::new(args.net.clone(), args.seed)),
    };

    let steps = match (args.steps, args.epochs) {
        (Some(s), _) => s,
        (None, Some(e)) => e * images.len().div_ceil(args.batch),
        (None, None) => unreachable!("validated in parse"),
    };
    let cfg = TrainConfig {
        batch_size: args.batch,
        learning_rate: args.lr,
        steps,
        crop: args.crop,
        seed: args.seed,
        norm,
    };
    let trace = train_denoiser(&mut state, &images, &sched, &cfg)?;

    let ckpt_path = args.out_dir.join("denoiser.ckpt");
    save_checkpoint(&ckpt_path, &state, &sched, &norm, true)?;
    write_trace_csv(&args.out_dir.join("loss_trace.csv"), "loss", &trace)?;
    println!(
        "trained {} steps on {} images: loss {:.4} -> {:.4}; checkpoint {}",
        trace.len(),
        images.len(),
        trace.first().copied().unwrap_or(f64::NAN),
        trace.last().copied().unwrap_or(f64::NAN),
        ckpt_path.display()
    );
    Ok(())
}
