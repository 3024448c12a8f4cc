//! `sctk export`: window/level mapping of material images to 8-bit
//! grayscale PNG or PGM.
//!
//! Keys: `image.path`, `export.format` (png | pgm), `export.water.window`,
//! `export.water.level`, `export.calcium.window`, `export.calcium.level`,
//! `out_dir`. Defaults follow the display convention W/L 1.2/0.6 g/ml for
//! water and 0.05/0.1 g/ml for calcium.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sctk_core::image::ImagePlane;
use sctk_core::io::read_material_image;

use crate::config::Config;

pub struct Args {
    image: PathBuf,
    format: String,
    water_wl: (f64, f64),
    calcium_wl: (f64, f64),
    out_dir: PathBuf,
}

pub fn parse(cfg: &mut Config) -> Option<Args> {
    let format = cfg.str_or("export.format", "png");
    if format != "png" && format != "pgm" {
        cfg.error(format!("export.format: expected png or pgm, got `{format}`"));
    }
    let args = Args {
        image: cfg.require_path("image.path"),
        format,
        water_wl: (
            cfg.parse_or("export.water.window", 1.2),
            cfg.parse_or("export.water.level", 0.6),
        ),
        calcium_wl: (
            cfg.parse_or("export.calcium.window", 0.05),
            cfg.parse_or("export.calcium.level", 0.1),
        ),
        out_dir: cfg.require_path("out_dir"),
    };
    if args.water_wl.0 <= 0.0 || args.calcium_wl.0 <= 0.0 {
        cfg.error("window must be positive");
    }
    Some(args)
}

/// Linear window/level mapping to 8 bits: `level` maps to mid-gray and
/// values at or beyond `level +/- window/2` saturate.
pub fn window_level_to_u8(value: f64, window: f64, level: f64) -> u8 {
    let lo = level - window / 2.0;
    let t = ((value - lo) / window).clamp(0.0, 1.0);
    (t * 255.0).round() as u8
}

fn plane_to_bytes(plane: &ImagePlane, window: f64, level: f64) -> Vec<u8> {
    plane.data.iter().map(|&v| window_level_to_u8(v, window, level)).collect()
}

fn write_pgm(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    sctk_core::io::write_atomic(path, &out)?;
    Ok(())
}

pub fn run(args: &Args) -> Result<()> {
    let (img, _) = read_material_image(&args.image)
        .with_context(|| format!("loading image {}", args.image.display()))?;
    std::fs::create_dir_all(&args.out_dir)?;
    let base = args
        .image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string();
    for (channel, plane, (w, l)) in [
        ("water", &img.water, args.water_wl),
        ("calcium", &img.calcium, args.calcium_wl),
    ] {
        let bytes = plane_to_bytes(plane, w, l);
        let path = args.out_dir.join(format!("{base}_{channel}.{}", args.format));
        match args.format.as_str() {
            "png" => {
                let buf = image::GrayImage::from_raw(
                    plane.width as u32,
                    plane.height as u32,
                    bytes,
                )
                .expect("buffer size matches dimensions");
                // Write through a temp file for atomicity.
                let tmp = path.with_extension("png.tmp");
                buf.save_with_format(&tmp, image::ImageFormat::Png)?;
                std::fs::rename(&tmp, &path)?;
            }
            _ => write_pgm(&path, plane.width, plane.height, &bytes)?,
        }
        println!("wrote {} (W/L {w}/{l} g/ml)", path.display());
    }
    Ok(())
}
