//! Ground-truth water/calcium basis images.
//!
//! Two sources: soft-threshold decomposition of a single-energy attenuation
//! image, and procedural phantom synthesis (the desk-scale stand-in for a
//! clinical training corpus).
//!
//! The soft-threshold transition branch for water is evaluated as
//! `rho_w = k_w*mu_w + k_wc*(mu - mu_w)` with a negative `k_wc`, so the
//! water density falls linearly and meets the upper branch (zero) at `mu_c`
//! to within 5e-4 g/ml. Negative outputs clamp to zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{CoreError, Result};
use crate::image::{AttenuationImage, ImagePlane, MaterialImage};

/// Bump when a recipe changes shape or densities; recorded in metadata so
/// regression baselines can be invalidated deliberately.
pub const RECIPE_VERSION: u32 = 1;

/// Water attenuation (1/cm) at the reference energy used to convert the
/// 2000 HU preprocessing bound into an attenuation cap. The reference energy
/// is a configuration constant, not a physical claim.
pub const MU_WATER_REF: f64 = 0.2;

/// Attenuation cap applied before thresholding: 2000 HU above water, i.e.
/// `mu_ref * (1 + 2000/1000)`.
pub fn attenuation_cap(mu_water_ref: f64) -> f64 {
    mu_water_ref * 3.0
}

/// Slopes and breakpoints of the two soft-threshold material maps.
#[derive(Debug, Clone, Copy)]
pub struct ThresholdParams {
    /// Water slope below `mu_w` (g/cm^2 equivalent).
    pub k_w: f64,
    /// Water slope on the transition branch; negative by convention.
    pub k_wc: f64,
    /// Calcium slope on the transition branch.
    pub k_cw: f64,
    /// Calcium slope above `mu_c`.
    pub k_c: f64,
    /// Lower breakpoint (1/cm).
    pub mu_w: f64,
    /// Upper breakpoint (1/cm).
    pub mu_c: f64,
}

impl ThresholdParams {
    /// Empirical constants used throughout this project.
    pub fn standard() -> Self {
        Self { k_w: 5.18, k_wc: -8.77, k_cw: 5.69, k_c: 2.12, mu_w: 0.22, mu_c: 0.35 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu_w < self.mu_c) {
            return Err(CoreError::InvalidConfig("mu_w must be < mu_c".into()));
        }
        if self.k_w <= 0.0 || self.k_c <= 0.0 || self.k_cw <= 0.0 {
            return Err(CoreError::InvalidConfig(
                "k_w, k_c, k_cw must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl Default for ThresholdParams {
    fn default() -> Self {
        Self::standard()
    }
}

fn check_mu(mu: f64) -> Result<()> {
    if !mu.is_finite() {
        return Err(CoreError::NonFinite("attenuation value".into()));
    }
    if mu < 0.0 {
        return Err(CoreError::InvalidInput(format!(
            "attenuation must be non-negative, got {mu}"
        )));
    }
    Ok(())
}

/// Water density (g/ml) from a single-energy attenuation value.
pub fn water_density(mu: f64, p: &ThresholdParams) -> Result<f64> {
    check_mu(mu)?;
    let v = if mu <= p.mu_w {
        p.k_w * mu
    } else if mu < p.mu_c {
        p.k_w * p.mu_w + p.k_wc * (mu - p.mu_w)
    } else {
        0.0
    };
    Ok(v.max(0.0))
}

/// Calcium density (g/ml) from a single-energy attenuation value.
pub fn calcium_density(mu: f64, p: &ThresholdParams) -> Result<f64> {
    check_mu(mu)?;
    let v = if mu >= p.mu_c {
        p.k_c * (mu - p.mu_c) + p.k_cw * (p.mu_c - p.mu_w)
    } else if mu > p.mu_w {
        p.k_cw * (mu - p.mu_w)
    } else {
        0.0
    };
    Ok(v.max(0.0))
}

/// Apply both threshold maps per pixel, after capping attenuation at the
/// 2000 HU-equivalent bound.
pub fn decompose_attenuation(img: &AttenuationImage, p: &ThresholdParams) -> Result<MaterialImage> {
    p.validate()?;
    let cap = attenuation_cap(MU_WATER_REF);
    let mut water = ImagePlane::zeros(img.grid.height, img.grid.width);
    let mut calcium = ImagePlane::zeros(img.grid.height, img.grid.width);
    for (i, &mu) in img.grid.data.iter().enumerate() {
        let mu = mu.min(cap);
        water.data[i] = water_density(mu, p)?;
        calcium.data[i] = calcium_density(mu, p)?;
    }
    MaterialImage::new(water, calcium, img.pixel_size_mm)
}

// ---------------------------------------------------------------------------
// Procedural phantoms
// ---------------------------------------------------------------------------

/// Named phantom recipes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhantomRecipe {
    /// Elliptical body with lung cavities, spine, ribs, and a contrast pool.
    EllipseChest,
    /// Water cylinder with fixed-density disk inserts; the insert table is
    /// the oracle for regression tests.
    DiskInserts,
    /// Seeded random soft-tissue background with air cavities and calcium blobs.
    RandomBlobs,
}

impl PhantomRecipe {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "ellipse-chest" => Ok(Self::EllipseChest),
            "disk-inserts" => Ok(Self::DiskInserts),
            "random-blobs" => Ok(Self::RandomBlobs),
            other => Err(CoreError::InvalidConfig(format!(
                "unknown phantom recipe `{other}` (expected ellipse-chest, disk-inserts, random-blobs)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::EllipseChest => "ellipse-chest",
            Self::DiskInserts => "disk-inserts",
            Self::RandomBlobs => "random-blobs",
        }
    }
}

/// Size and recipe selection for [`synth_phantom`].
#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub recipe: PhantomRecipe,
    pub height: usize,
    pub width: usize,
    pub pixel_size_mm: f64,
}

impl PhantomSpec {
    pub fn new(recipe: PhantomRecipe, size: usize, pixel_size_mm: f64) -> Self {
        Self { recipe, height: size, width: size, pixel_size_mm }
    }
}

/// One disk insert: fractional center/radius plus exact densities.
#[derive(Debug, Clone, Copy)]
pub struct DiskInsert {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub water: f64,
    pub calcium: f64,
}

/// The disk-inserts recipe table (fractions of the grid dimension).
pub fn disk_insert_table() -> [DiskInsert; 4] {
    [
        DiskInsert { cx: 0.32, cy: 0.32, radius: 0.10, water: 1.0, calcium: 0.0 },
        DiskInsert { cx: 0.68, cy: 0.32, radius: 0.10, water: 0.95, calcium: 0.10 },
        DiskInsert { cx: 0.32, cy: 0.68, radius: 0.10, water: 0.90, calcium: 0.40 },
        DiskInsert { cx: 0.68, cy: 0.68, radius: 0.10, water: 0.20, calcium: 1.20 },
    ]
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

/// Paints `value` over the ellipse support in `plane` using pixel-center
/// membership, so region means are exact.
fn paint(plane: &mut ImagePlane, e: &Ellipse, value: f64) {
    let (h, w) = (plane.height, plane.width);
    for r in 0..h {
        let y = (r as f64 + 0.5) / h as f64;
        for c in 0..w {
            let x = (c as f64 + 0.5) / w as f64;
            if e.contains(x, y) {
                plane.set(r, c, value);
            }
        }
    }
}

fn disk(cx: f64, cy: f64, radius: f64) -> Ellipse {
    Ellipse { cx, cy, rx: radius, ry: radius }
}

/// Deterministic phantom synthesis: identical (seed, spec) pairs give
/// bit-identical images.
pub fn synth_phantom(seed: u64, spec: &PhantomSpec) -> Result<MaterialImage> {
    if spec.height < 16 || spec.width < 16 {
        return Err(CoreError::InvalidConfig(
            "phantom grid must be at least 16x16".into(),
        ));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut img = MaterialImage::zeros(spec.height, spec.width, spec.pixel_size_mm);
    match spec.recipe {
        PhantomRecipe::EllipseChest => ellipse_chest(&mut img, &mut rng),
        PhantomRecipe::DiskInserts => disk_inserts(&mut img),
        PhantomRecipe::RandomBlobs => random_blobs(&mut img, &mut rng),
    }
    Ok(img)
}

fn ellipse_chest(img: &mut MaterialImage, rng: &mut ChaCha12Rng) {
    let jit = |rng: &mut ChaCha12Rng, s: f64| rng.gen_range(-s..=s);

    // Body: soft tissue on an air background.
    let body = Ellipse { cx: 0.5, cy: 0.5, rx: 0.42 + jit(rng, 0.01), ry: 0.33 + jit(rng, 0.01) };
    let tissue = 1.0 + jit(rng, 0.02);
    paint(&mut img.water, &body, tissue);

    // Lungs: low-density cavities.
    let lung_w = 0.14 + jit(rng, 0.01);
    let lung_h = 0.19 + jit(rng, 0.01);
    let lung_density = 0.22 + jit(rng, 0.03);
    for side in [-1.0, 1.0] {
        let e = Ellipse {
            cx: 0.5 + side * (0.18 + jit(rng, 0.01)),
            cy: 0.44 + jit(rng, 0.01),
            rx: lung_w,
            ry: lung_h,
        };
        paint(&mut img.water, &e, lung_density);
    }

    // Spine: calcium disk near the posterior edge with reduced water.
    let spine = disk(0.5 + jit(rng, 0.005), 0.74 + jit(rng, 0.005), 0.055);
    paint(&mut img.water, &spine, 0.30);
    paint(&mut img.calcium, &spine, 0.80 + jit(rng, 0.05));

    // Ribs: small calcium disks along the body boundary.
    let n_ribs = 8;
    for k in 0..n_ribs {
        let theta = std::f64::consts::PI * (0.15 + 0.7 * k as f64 / (n_ribs - 1) as f64)
            + jit(rng, 0.02);
        let rib = disk(
            0.5 + 0.9 * body.rx * theta.cos(),
            0.5 - 0.9 * body.ry * theta.sin(),
            0.018,
        );
        paint(&mut img.calcium, &rib, 0.40 + jit(rng, 0.05));
    }

    // Contrast pool (aorta analogue): small calcium uptake in the mediastinum.
    let pool = disk(0.5 + jit(rng, 0.01), 0.52 + jit(rng, 0.01), 0.045);
    paint(&mut img.water, &pool, 1.0);
    paint(&mut img.calcium, &pool, 0.15 + jit(rng, 0.02));
}

fn disk_inserts(img: &mut MaterialImage) {
    // Background cylinder of water.
    let body = disk(0.5, 0.5, 0.45);
    paint(&mut img.water, &body, 1.0);
    for ins in disk_insert_table() {
        let d = disk(ins.cx, ins.cy, ins.radius);
        paint(&mut img.water, &d, ins.water);
        paint(&mut img.calcium, &d, ins.calcium);
    }
}

fn random_blobs(img: &mut MaterialImage, rng: &mut ChaCha12Rng) {
    let body = disk(0.5, 0.5, 0.45);

    // Smooth background in [0.9, 1.1]: a few random low-frequency cosines,
    // squashed through tanh to bound the excursion.
    let n_waves = 5;
    let waves: Vec<(f64, f64, f64, f64)> = (0..n_waves)
        .map(|_| {
            (
                rng.gen_range(0.5..2.5),
                rng.gen_range(0.5..2.5),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.4..1.0),
            )
        })
        .collect();
    let (h, w) = (img.height(), img.width());
    for r in 0..h {
        let y = (r as f64 + 0.5) / h as f64;
        for c in 0..w {
            let x = (c as f64 + 0.5) / w as f64;
            if body.contains(x, y) {
                let mut s = 0.0;
                for &(fx, fy, ph, amp) in &waves {
                    s += amp * (std::f64::consts::TAU * (fx * x + fy * y) + ph).cos();
                }
                img.water.set(r, c, 1.0 + 0.1 * (s / 1.5).tanh());
            }
        }
    }

    // Air cavities.
    for _ in 0..rng.gen_range(2..=4usize) {
        let e = Ellipse {
            cx: rng.gen_range(0.3..0.7),
            cy: rng.gen_range(0.3..0.7),
            rx: rng.gen_range(0.03..0.09),
            ry: rng.gen_range(0.03..0.09),
        };
        paint(&mut img.water, &e, 0.0);
    }

    // Disjoint calcium features, rejection-sampled to avoid overlap.
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    let n_blobs = rng.gen_range(3..=6usize);
    let mut attempts = 0;
    while placed.len() < n_blobs && attempts < 200 {
        attempts += 1;
        let (cx, cy, rad) = (
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.2..0.8),
            rng.gen_range(0.02..0.07),
        );
        if placed
            .iter()
            .any(|&(px, py, pr)| ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() < pr + rad + 0.02)
        {
            continue;
        }
        let density = rng.gen_range(0.1..1.5);
        paint(&mut img.calcium, &disk(cx, cy, rad), density);
        placed.push((cx, cy, rad));
    }
}
