//! `sctk simulate`: spectral measurement simulation.
//!
//! Keys: `phantom.path` (stem of a material image), the geometry and
//! system blocks, `exposure.mas_per_view`, `seed`, `out_dir`. Writes
//! `mean` and `sample` sinograms with seeds recorded in metadata.

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use sctk_core::geometry::Geometry;
use sctk_core::io::{read_material_image, Metadata};
use sctk_core::projector::Projector;
use sctk_core::spectral::{sample_measurement, SpectralOperator, SpectralSystem};

use crate::config::Config;
use crate::commands::write_sinogram;

pub struct Args {
    phantom: PathBuf,
    geom: Geometry,
    sys: SpectralSystem,
    mas_per_view: f64,
    seed: u64,
    out_dir: PathBuf,
}

pub fn parse(cfg: &mut Config) -> Option<Args> {
    let phantom = cfg.require_path("phantom.path");
    let geom = super::geometry_from_config(cfg);
    let mas: f64 = cfg.parse_or("exposure.mas_per_view", 0.05);
    let sys = super::system_from_config(cfg);
    let seed: u64 = cfg.require_parse("seed");
    let out_dir = cfg.require_path("out_dir");
    Some(Args { phantom, geom: geom?, sys: sys?, mas_per_view: mas, seed, out_dir })
}

pub fn run(args: &Args) -> Result<()> {
    let (truth, _) = read_material_image(&args.phantom)
        .with_context(|| format!("loading phantom {}", args.phantom.display()))?;
    anyhow::ensure!(
        (truth.height(), truth.width()) == args.geom.image_shape,
        "phantom {}x{} does not match geometry {}x{}",
        truth.height(),
        truth.width(),
        args.geom.image_shape.0,
        args.geom.image_shape.1
    );
    let proj = Arc::new(Projector::new(&args.geom)?);
    let op = SpectralOperator::new(args.sys.clone(), proj)?;
    let mean = op.mean_measurement(&truth)?;
    let sample = sample_measurement(&mean, args.seed)?;

    let mut meta = Metadata::new();
    meta.set("phantom", args.phantom.display());
    meta.set("exposure_mas_per_view", args.mas_per_view);
    meta.set("photons_per_ray", args.sys.air_count(0).max(args.sys.air_count(1)));
    meta.set("energy_weighted", args.sys.energy_weighted);
    let sys = op.system();
    // Record the actual source total so the system can be rebuilt exactly.
    let mut meta_mean = meta.clone();
    meta_mean.set("kind", "mean");
    meta_mean.set("photons_per_ray", sys.spectra[0].iter().sum::<f64>());
    write_sinogram(&args.out_dir.join("mean"), &mean, &args.geom, sys, &meta_mean)?;
    let mut meta_sample = meta;
    meta_sample.set("kind", "sample");
    meta_sample.set("photons_per_ray", sys.spectra[0].iter().sum::<f64>());
    meta_sample.set("noise_seed", args.seed);
    write_sinogram(&args.out_dir.join("sample"), &sample, &args.geom, sys, &meta_sample)?;

    let n_views = args.geom.n_views;
    let ch0 = (0..n_views).filter(|&v| sample.active(0, v)).count();
    let ch1 = (0..n_views).filter(|&v| sample.active(1, v)).count();
    println!(
        "simulated {} views ({} channel-0, {} channel-1), {} detectors, seed {}",
        n_views, ch0, ch1, args.geom.n_det, args.seed
    );
    Ok(())
}
