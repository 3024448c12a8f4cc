//! `sctk evaluate`: metric reports and the timing comparison table.
//!
//! Keys: `results_dir` (holding per-algorithm subdirectories produced by
//! `decompose`), `truth.path`, `metrics.fov_mask`, `out_dir`. Emits
//! `report.json`, `timing.csv`, and `timing.txt`; when both sdps and jsdps
//! are present the wall-time ratio is printed and flagged against the
//! desk threshold 0.3.

use std::path::PathBuf;

use anyhow::{Context, Result};
use sctk_core::io::{read_material_image, write_atomic};
use sctk_core::metrics::{ensemble_stats, quality_report, MetricParams};

use crate::config::Config;

pub struct Args {
    results_dir: PathBuf,
    truth: PathBuf,
    fov_mask: bool,
    out_dir: PathBuf,
}

pub fn parse(cfg: &mut Config) -> Option<Args> {
    Some(Args {
        results_dir: cfg.require_path("results_dir"),
        truth: cfg.require_path("truth.path"),
        fov_mask: cfg.parse_bool_or("metrics.fov_mask", true),
        out_dir: cfg.require_path("out_dir"),
    })
}

struct AlgoEntry {
    name: String,
    n_members: usize,
    iterations: usize,
    total_wall_s: f64,
    report: sctk_core::metrics::QualityReport,
    bias_norm: Option<f64>,
    std_norm: Option<f64>,
    var_norm: Option<f64>,
}

pub fn run(args: &Args) -> Result<()> {
    let (truth, _) = read_material_image(&args.truth)
        .with_context(|| format!("loading truth {}", args.truth.display()))?;
    let params = MetricParams { fov_mask: args.fov_mask, ..Default::default() };

    let mut entries: Vec<AlgoEntry> = Vec::new();
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&args.results_dir)
        .with_context(|| format!("results directory {}", args.results_dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("run_manifest.txt").exists())
        .collect();
    dirs.sort();
    anyhow::ensure!(!dirs.is_empty(), "no run manifests under {}", args.results_dir.display());

    for dir in &dirs {
        let manifest = sctk_core::io::Metadata::from_text(
            &std::fs::read_to_string(dir.join("run_manifest.txt"))?,
            &dir.join("run_manifest.txt"),
        )?;
        let name = manifest
            .get("algorithm")
            .unwrap_or(dir.file_name().and_then(|n| n.to_str()).unwrap_or("unknown"))
            .to_string();
        let mut members = Vec::new();
        let mut iterations = 0usize;
        for k in 0.. {
            let stem = dir.join(format!("member_{k:04}"));
            if !stem.with_extension("bin").exists() {
                break;
            }
            let (img, meta) = read_material_image(&stem)?;
            iterations = meta
                .get("iterations")
                .and_then(|v| v.parse().ok())
                .unwrap_or(iterations);
            members.push(img);
        }
        anyhow::ensure!(!members.is_empty(), "no members in {}", dir.display());
        let total_wall_s: f64 = manifest
            .get("total_wall_time_s")
            .and_then(|v| v.parse().ok())
            .unwrap_or(f64::NAN);

        // Quality of the ensemble mean estimate (single member: itself).
        let mut mean = members[0].clone();
        if members.len() > 1 {
            let mut acc = sctk_core::image::MaterialImage::zeros(
                mean.height(),
                mean.width(),
                mean.pixel_size_mm,
            );
            for m in &members {
                acc.axpy(1.0, m);
            }
            acc.scale(1.0 / members.len() as f64);
            mean = acc;
        }
        let report = quality_report(&mean, &truth, &params)?;
        let (bias_norm, std_norm, var_norm) = if members.len() >= 2 {
            let st = ensemble_stats(&members, &truth, &params)?;
            (Some(st.bias_norm), Some(st.std_norm), Some(st.var_norm))
        } else {
            (None, None, None)
        };
        entries.push(AlgoEntry {
            name,
            n_members: members.len(),
            iterations,
            total_wall_s,
            report,
            bias_norm,
            std_norm,
            var_norm,
        });
    }

    // JSON report.
    let json = serde_json::json!({
        "truth": args.truth.display().to_string(),
        "fov_mask": args.fov_mask,
        "algorithms": entries.iter().map(|e| {
            serde_json::json!({
                "algorithm": e.name,
                "members": e.n_members,
                "iterations": e.iterations,
                "total_wall_time_s": e.total_wall_s,
                "quality_of_mean": e.report,
                "ensemble": {
                    "bias_norm": e.bias_norm,
                    "std_norm": e.std_norm,
                    "var_norm": e.var_norm,
                },
            })
        }).collect::<Vec<_>>(),
    });
    std::fs::create_dir_all(&args.out_dir)?;
    write_atomic(
        &args.out_dir.join("report.json"),
        serde_json::to_string_pretty(&json)?.as_bytes(),
    )?;

    // Timing table.
    let mut csv = String::from("algorithm,members,iterations,total_wall_time_s,time_per_member_s\n");
    let mut txt = String::from(format!(
        "{:<14} {:>8} {:>11} {:>16} {:>16}\n",
        "algorithm", "members", "iterations", "total_wall_s", "per_member_s"
    ));
    for e in &entries {
        let per = e.total_wall_s / e.n_members.max(1) as f64;
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            e.name, e.n_members, e.iterations, e.total_wall_s, per
        ));
        txt.push_str(&format!(
            "{:<14} {:>8} {:>11} {:>16.3} {:>16.3}\n",
            e.name, e.n_members, e.iterations, e.total_wall_s, per
        ));
    }
    let sdps_t = entries.iter().find(|e| e.name == "sdps").map(|e| e.total_wall_s / e.n_members as f64);
    let jsdps_t = entries.iter().find(|e| e.name == "jsdps").map(|e| e.total_wall_s / e.n_members as f64);
    if let (Some(s), Some(j)) = (sdps_t, jsdps_t) {
        let ratio = j / s;
        let verdict = if ratio <= 0.3 { "PASS" } else { "FAIL" };
        txt.push_str(&format!(
            "\njsdps/sdps wall-time ratio: {ratio:.4} (desk threshold 0.3: {verdict})\n"
        ));
        println!("jsdps/sdps wall-time ratio: {ratio:.4} (desk threshold 0.3: {verdict})");
    }
    write_atomic(&args.out_dir.join("timing.csv"), csv.as_bytes())?;
    write_atomic(&args.out_dir.join("timing.txt"), txt.as_bytes())?;

    for e in &entries {
        println!(
            "{:<14} members={} ssim(w)={:.4} ssim(c)={:.4} psnr(w)={:.2} rmse(w)={:.4}{}",
            e.name,
            e.n_members,
            e.report.water.ssim,
            e.report.calcium.ssim,
            e.report.water.psnr_db,
            e.report.water.rmse,
            match (e.bias_norm, e.std_norm) {
                (Some(b), Some(s)) => format!(" bias_norm={b:.4} std_norm={s:.4}"),
                _ => String::new(),
            }
        );
    }
    println!("report written to {}", args.out_dir.join("report.json").display());
    Ok(())
}
