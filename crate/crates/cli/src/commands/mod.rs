//! Subcommand implementations and shared config-to-object builders.

pub mod decompose;
pub mod evaluate;
pub mod export;
pub mod phantom;
pub mod simulate;
pub mod train;

use std::path::Path;

use anyhow::{Context, Result};
use sctk_core::geometry::{BeamModel, Geometry};
use sctk_core::io::{read_metadata, read_planes, write_planes, Metadata};
use sctk_core::spectral::{
    SpectralSinogram, SpectralSystem, SystemKind, ViewAssignment, PHOTONS_PER_MAS,
};

use crate::config::Config;

/// Geometry block: `geometry.size`, `geometry.views`, `geometry.dets`,
/// `geometry.det_pitch_mm`, `geometry.pixel_size_mm`, `geometry.arc_deg`,
/// `geometry.beam` (parallel | fan) plus `geometry.fan.source_iso_mm` /
/// `geometry.fan.source_det_mm`. Defaults are the desk-scale setup.
pub fn geometry_from_config(cfg: &mut Config) -> Option<Geometry> {
    let size: usize = cfg.parse_or("geometry.size", 128);
    let views: usize = cfg.parse_or("geometry.views", 360);
    let dets: usize = cfg.parse_or("geometry.dets", 192);
    let pitch: f64 = cfg.parse_or("geometry.det_pitch_mm", 1.0);
    let pixel: f64 = cfg.parse_or("geometry.pixel_size_mm", 0.8);
    let arc: f64 = cfg.parse_or("geometry.arc_deg", 360.0);
    let beam = match cfg.str_or("geometry.beam", "parallel").as_str() {
        "parallel" => BeamModel::Parallel,
        "fan" => BeamModel::Fan {
            source_to_iso_mm: cfg.parse_or("geometry.fan.source_iso_mm", 600.0),
            source_to_det_mm: cfg.parse_or("geometry.fan.source_det_mm", 1000.0),
        },
        other => {
            cfg.error(format!("geometry.beam: expected parallel or fan, got `{other}`"));
            BeamModel::Parallel
        }
    };
    match Geometry::new((size, size), pixel, views, dets, pitch, arc, beam) {
        Ok(g) => Some(g),
        Err(e) => {
            cfg.error(format!("geometry: {e}"));
            None
        }
    }
}

/// System block: `system` (dual-kvp | dual-layer) or `system.config_path`
/// pointing at a serialized system; `exposure.mas_per_view`;
/// `system.energy_weighted`.
pub fn system_from_config(cfg: &mut Config) -> Option<SpectralSystem> {
    if let Some(path) = cfg.opt_path("system.config_path") {
        return match SpectralSystem::read_config(&path) {
            Ok(sys) => Some(sys),
            Err(e) => {
                cfg.error(format!("system.config_path: {e}"));
                None
            }
        };
    }
    let kind_name = cfg.str_or("system", "dual-kvp");
    let mas: f64 = cfg.parse_or("exposure.mas_per_view", 0.05);
    if mas <= 0.0 {
        cfg.error("exposure.mas_per_view must be positive (means must be positive)");
        return None;
    }
    let photons = PHOTONS_PER_MAS * mas;
    let kind = match SystemKind::parse(&kind_name) {
        Ok(k) => k,
        Err(e) => {
            cfg.error(format!("system: {e}"));
            return None;
        }
    };
    let mut sys = match kind {
        SystemKind::DualKvp => SpectralSystem::dual_kvp(photons),
        SystemKind::DualLayer => SpectralSystem::dual_layer(photons),
        SystemKind::Custom => {
            cfg.error("system: custom systems require system.config_path");
            return None;
        }
    };
    sys.energy_weighted = cfg.parse_bool_or("system.energy_weighted", false);
    Some(sys)
}

/// Persist a spectral sinogram as four planes (counts then variances) with
/// geometry and system echoed in the metadata.
pub fn write_sinogram(
    stem: &Path,
    sino: &SpectralSinogram,
    geom: &Geometry,
    sys: &SpectralSystem,
    extra: &Metadata,
) -> Result<()> {
    let mut meta = extra.clone();
    meta.set("n_views", sino.n_views);
    meta.set("n_det", sino.n_det);
    meta.set("planes", "counts0,counts1,variance0,variance1");
    meta.set("view_assignment", sino.view_assignment.name());
    meta.set("system_kind", sys.kind.name());
    meta.set("gain_0", sys.gains[0]);
    meta.set("gain_1", sys.gains[1]);
    meta.set("geometry.views", geom.n_views);
    meta.set("geometry.dets", geom.n_det);
    meta.set("geometry.det_pitch_mm", geom.det_pitch_mm);
    meta.set("geometry.pixel_size_mm", geom.pixel_size_mm);
    meta.set("geometry.size", geom.image_shape.0);
    meta.set("geometry.arc_deg", geom.arc_deg);
    meta.set(
        "geometry.beam",
        match geom.beam {
            BeamModel::Parallel => "parallel".to_string(),
            BeamModel::Fan { source_to_iso_mm, source_to_det_mm } => {
                format!("fan {source_to_iso_mm} {source_to_det_mm}")
            }
        },
    );
    let planes = [
        sctk_core::image::ImagePlane::from_vec(sino.n_views, sino.n_det, sino.counts[0].clone())?,
        sctk_core::image::ImagePlane::from_vec(sino.n_views, sino.n_det, sino.counts[1].clone())?,
        sctk_core::image::ImagePlane::from_vec(sino.n_views, sino.n_det, sino.variance[0].clone())?,
        sctk_core::image::ImagePlane::from_vec(sino.n_views, sino.n_det, sino.variance[1].clone())?,
    ];
    write_planes(stem, &[&planes[0], &planes[1], &planes[2], &planes[3]], &meta)?;
    Ok(())
}

pub fn read_sinogram(stem: &Path) -> Result<(SpectralSinogram, Metadata)> {
    let meta = read_metadata(stem)?;
    let meta_path = stem.with_extension("meta");
    let n_views = meta.parse_usize("n_views", &meta_path)?;
    let n_det = meta.parse_usize("n_det", &meta_path)?;
    let assignment = match meta.require("view_assignment", &meta_path)? {
        "alternating" => ViewAssignment::Alternating,
        "all-views-both" => ViewAssignment::AllViewsBoth,
        other => anyhow::bail!("unknown view assignment `{other}` in {}", meta_path.display()),
    };
    let planes = read_planes(stem, 4, n_views, n_det)?;
    let mut sino = SpectralSinogram::zeros(n_views, n_det, assignment);
    sino.counts[0] = planes[0].data.clone();
    sino.counts[1] = planes[1].data.clone();
    sino.variance[0] = planes[2].data.clone();
    sino.variance[1] = planes[3].data.clone();
    Ok((sino, meta))
}

/// Rebuild the geometry echoed in sinogram metadata.
pub fn geometry_from_metadata(meta: &Metadata, origin: &Path) -> Result<Geometry> {
    let mp = origin.with_extension("meta");
    let size = meta.parse_usize("geometry.size", &mp)?;
    let views = meta.parse_usize("geometry.views", &mp)?;
    let dets = meta.parse_usize("geometry.dets", &mp)?;
    let pitch = meta.parse_f64("geometry.det_pitch_mm", &mp)?;
    let pixel = meta.parse_f64("geometry.pixel_size_mm", &mp)?;
    let arc = meta.parse_f64("geometry.arc_deg", &mp)?;
    let beam_str = meta.require("geometry.beam", &mp)?;
    let beam = if beam_str == "parallel" {
        BeamModel::Parallel
    } else {
        let parts: Vec<&str> = beam_str.split_whitespace().collect();
        anyhow::ensure!(parts.len() == 3 && parts[0] == "fan", "bad beam `{beam_str}`");
        BeamModel::Fan {
            source_to_iso_mm: parts[1].parse().context("fan source_iso")?,
            source_to_det_mm: parts[2].parse().context("fan source_det")?,
        }
    };
    Ok(Geometry::new((size, size), pixel, views, dets, pitch, arc, beam)?)
}

/// The system used when the sinogram was simulated, rebuilt at the same
/// exposure from metadata.
pub fn system_from_metadata(meta: &Metadata, origin: &Path) -> Result<SpectralSystem> {
    let mp = origin.with_extension("meta");
    let kind = SystemKind::parse(meta.require("system_kind", &mp)?)?;
    let photons = meta.parse_f64("photons_per_ray", &mp)?;
    let mut sys = match kind {
        SystemKind::DualKvp => SpectralSystem::dual_kvp(photons),
        SystemKind::DualLayer => SpectralSystem::dual_layer(photons),
        SystemKind::Custom => anyhow::bail!("custom system cannot be rebuilt from metadata"),
    };
    if let Some(w) = meta.get("energy_weighted") {
        sys.energy_weighted = w == "true";
    }
    Ok(sys)
}
