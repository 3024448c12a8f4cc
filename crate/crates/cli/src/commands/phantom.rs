//! `sctk phantom`: generate ground-truth material images.
//!
//! Keys: `phantom.recipe`, `phantom.size`, `phantom.pixel_size_mm`,
//! `phantom.count`, `phantom.name`, `seed`, `out_dir`.

use std::path::PathBuf;

use anyhow::Result;
use sctk_core::io::{write_material_image, Metadata};
use sctk_core::phantoms::{synth_phantom, PhantomRecipe, PhantomSpec, RECIPE_VERSION};

use crate::config::Config;

pub struct Args {
    recipe: PhantomRecipe,
    size: usize,
    pixel_size_mm: f64,
    count: usize,
    name: String,
    seed: u64,
    out_dir: PathBuf,
}

pub fn parse(cfg: &mut Config) -> Option<Args> {
    let recipe_name = cfg.require_str("phantom.recipe");
    let recipe = match PhantomRecipe::parse(&recipe_name) {
        Ok(r) => Some(r),
        Err(e) => {
            cfg.error(format!("phantom.recipe: {e}"));
            None
        }
    };
    let args = Args {
        recipe: recipe?,
        size: cfg.parse_or("phantom.size", 128),
        pixel_size_mm: cfg.parse_or("phantom.pixel_size_mm", 0.8),
        count: cfg.parse_or("phantom.count", 1),
        name: cfg.str_or("phantom.name", "phantom"),
        seed: cfg.require_parse("seed"),
        out_dir: cfg.require_path("out_dir"),
    };
    if args.size < 16 {
        cfg.error("phantom.size must be at least 16");
    }
    if args.count < 1 {
        cfg.error("phantom.count must be at least 1");
    }
    Some(args)
}

pub fn run(args: &Args) -> Result<()> {
    let spec = PhantomSpec {
        recipe: args.recipe,
        height: args.size,
        width: args.size,
        pixel_size_mm: args.pixel_size_mm,
    };
    for k in 0..args.count {
        let seed = args.seed + k as u64;
        let img = synth_phantom(seed, &spec)?;
        let mut meta = Metadata::new();
        meta.set("recipe", args.recipe.name());
        meta.set("recipe_version", RECIPE_VERSION);
        meta.set("seed", seed);
        let stem = if args.count == 1 {
            args.out_dir.join(&args.name)
        } else {
            args.out_dir.join(format!("{}_{k:04}", args.name))
        };
        write_material_image(&stem, &img, &meta)?;
        println!(
            "phantom {}: recipe={} seed={} {}x{} water mean {:.4} g/ml, calcium mean {:.4} g/ml",
            stem.display(),
            args.recipe.name(),
            seed,
            args.size,
            args.size,
            img.water.mean(),
            img.calcium.mean()
        );
    }
    Ok(())
}
