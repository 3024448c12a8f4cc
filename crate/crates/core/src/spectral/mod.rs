//! Polyenergetic spectral CT systems and measurements.
//!
//! A [`SpectralSystem`] bundles everything in the measurement model except
//! the projector and the image: source spectra, detector responses, the
//! water/calcium mass-attenuation table, per-channel gains, and the
//! per-view channel assignment. Means follow
//! `ybar = B * S * exp(-Q A x)` with a Riemann sum over 1 keV bins; noise
//! is Poisson with the diagonal Gaussian approximation `K_ii = max(y_i, 1)`.

pub mod attenuation;
mod model;

pub use model::{sample_measurement, SpectralOperator};

use std::path::Path;

use crate::error::{CoreError, Result};
use crate::io::{write_atomic, Metadata};

use attenuation::{
    attenuation_table, csi_absorbed_fraction, csi_transmitted_fraction, kramers_spectrum, Material,
};

/// Photons per ray per mAs of tube load: the documented desk-scale
/// exposure-to-quanta conversion. 0.05 mAs/view maps to 2e4 photons/ray.
pub const PHOTONS_PER_MAS: f64 = 4.0e5;

/// Default exposure, mAs per view.
pub const DEFAULT_MAS_PER_VIEW: f64 = 0.05;

/// Variance floor (counts) of the Gaussian approximation to Poisson noise.
pub const VARIANCE_FLOOR: f64 = 1.0;

pub const N_CHANNELS: usize = 2;

/// Energy sampling: strictly increasing bin centres with a common width.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyGrid {
    pub energies_kev: Vec<f64>,
    pub bin_width_kev: f64,
}

impl EnergyGrid {
    /// 1 keV bins over [10, 150].
    pub fn diagnostic() -> Self {
        Self {
            energies_kev: (10..150).map(|e| e as f64 + 0.5).collect(),
            bin_width_kev: 1.0,
        }
    }

    /// Degenerate single-bin grid used by linearized test systems.
    pub fn single(kev: f64) -> Self {
        Self { energies_kev: vec![kev], bin_width_kev: 1.0 }
    }

    pub fn len(&self) -> usize {
        self.energies_kev.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies_kev.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.energies_kev.is_empty() {
            return Err(CoreError::InvalidConfig("empty energy grid".into()));
        }
        if self.energies_kev[0] <= 0.0 {
            return Err(CoreError::InvalidConfig("energies must be positive".into()));
        }
        if !self.energies_kev.windows(2).all(|w| w[0] < w[1]) {
            return Err(CoreError::InvalidConfig("energies must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Which channels see which views.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewAssignment {
    /// Dual-kVp: channel 0 on even views, channel 1 on odd views.
    Alternating,
    /// Dual-layer: every view reaches both channels.
    AllViewsBoth,
}

impl ViewAssignment {
    #[inline]
    pub fn active(&self, channel: usize, view: usize) -> bool {
        match self {
            ViewAssignment::Alternating => view % 2 == channel,
            ViewAssignment::AllViewsBoth => true,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ViewAssignment::Alternating => "alternating",
            ViewAssignment::AllViewsBoth => "all-views-both",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemKind {
    DualKvp,
    DualLayer,
    /// Free-form system built directly from tables (tests, linearizations).
    Custom,
}

impl SystemKind {
    pub fn name(&self) -> &'static str {
        match self {
            SystemKind::DualKvp => "dual-kvp",
            SystemKind::DualLayer => "dual-layer",
            SystemKind::Custom => "custom",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "dual-kvp" => Ok(Self::DualKvp),
            "dual-layer" => Ok(Self::DualLayer),
            "custom" => Ok(Self::Custom),
            other => Err(CoreError::InvalidConfig(format!(
                "unknown system kind `{other}` (expected dual-kvp or dual-layer)"
            ))),
        }
    }
}

/// Everything in the measurement model except the projector and the image.
#[derive(Debug, Clone)]
pub struct SpectralSystem {
    pub kind: SystemKind,
    pub grid: EnergyGrid,
    /// Source fluence per channel, photons per bin per ray (unattenuated).
    pub spectra: [Vec<f64>; N_CHANNELS],
    /// Detector absorbed fraction per channel, in [0, 1].
    pub detector_response: [Vec<f64>; N_CHANNELS],
    /// Mass attenuation (cm^2/g): q[0] water, q[1] calcium.
    pub q: [Vec<f64>; N_CHANNELS],
    /// Per-channel gain B.
    pub gains: [f64; N_CHANNELS],
    pub view_assignment: ViewAssignment,
    /// Energy-integrating detector weighting instead of photon counting.
    pub energy_weighted: bool,
}

impl SpectralSystem {
    /// Dual-kVp system: 80/120 kVp tubes alternating every other view, a
    /// single 600 um CsI detector layer.
    pub fn dual_kvp(photons_per_ray: f64) -> Self {
        let grid = EnergyGrid::diagnostic();
        let e = &grid.energies_kev;
        let resp = csi_absorbed_fraction(0.06, e);
        Self {
            kind: SystemKind::DualKvp,
            spectra: [
                kramers_spectrum(80.0, 0.25, e, photons_per_ray),
                kramers_spectrum(120.0, 0.25, e, photons_per_ray),
            ],
            detector_response: [resp.clone(), resp],
            q: [
                attenuation_table(Material::Water, e),
                attenuation_table(Material::Calcium, e),
            ],
            gains: [1.0, 1.0],
            view_assignment: ViewAssignment::Alternating,
            energy_weighted: false,
            grid,
        }
    }

    /// Dual-layer system: one 120 kVp tube, 300 um CsI top layer and
    /// 600 um CsI bottom layer behind it (gap treated as non-attenuating).
    pub fn dual_layer(photons_per_ray: f64) -> Self {
        let grid = EnergyGrid::diagnostic();
        let e = &grid.energies_kev;
        let top = csi_absorbed_fraction(0.03, e);
        let through_top = csi_transmitted_fraction(0.03, e);
        let bottom: Vec<f64> = csi_absorbed_fraction(0.06, e)
            .iter()
            .zip(through_top.iter())
            .map(|(a, t)| a * t)
            .collect();
        let spectrum = kramers_spectrum(120.0, 0.25, e, photons_per_ray);
        Self {
            kind: SystemKind::DualLayer,
            spectra: [spectrum.clone(), spectrum],
            detector_response: [top, bottom],
            q: [
                attenuation_table(Material::Water, e),
                attenuation_table(Material::Calcium, e),
            ],
            gains: [1.0, 1.0],
            view_assignment: ViewAssignment::AllViewsBoth,
            energy_weighted: false,
        grid,
        }
    }

    /// Degenerate single-energy system with constant mass attenuation,
    /// useful for Beer-Lambert oracles and linearization.
    pub fn single_energy(
        photons_per_ray: f64,
        q_water: f64,
        q_calcium: f64,
        view_assignment: ViewAssignment,
    ) -> Self {
        let grid = EnergyGrid::single(60.0);
        Self {
            kind: SystemKind::Custom,
            spectra: [vec![photons_per_ray], vec![photons_per_ray]],
            detector_response: [vec![1.0], vec![1.0]],
            q: [vec![q_water], vec![q_calcium]],
            gains: [1.0, 1.0],
            view_assignment,
            energy_weighted: false,
            grid,
        }
    }

    /// System for the named kind at the default desk exposure.
    pub fn by_kind(kind: SystemKind) -> Result<Self> {
        let photons = PHOTONS_PER_MAS * DEFAULT_MAS_PER_VIEW;
        match kind {
            SystemKind::DualKvp => Ok(Self::dual_kvp(photons)),
            SystemKind::DualLayer => Ok(Self::dual_layer(photons)),
            SystemKind::Custom => Err(CoreError::InvalidConfig(
                "custom systems must be built from tables".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let n = self.grid.len();
        for c in 0..N_CHANNELS {
            if self.spectra[c].len() != n || self.detector_response[c].len() != n {
                return Err(CoreError::InvalidConfig(
                    "spectrum/response length does not match energy grid".into(),
                ));
            }
            if self.q[c].len() != n {
                return Err(CoreError::InvalidConfig(
                    "attenuation table length does not match energy grid".into(),
                ));
            }
            if self.spectra[c].iter().any(|&v| v < 0.0) {
                return Err(CoreError::InvalidConfig("spectra must be non-negative".into()));
            }
            if self.detector_response[c].iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(CoreError::InvalidConfig(
                    "detector response must lie in [0, 1]".into(),
                ));
            }
            if self.q[c].iter().any(|&v| v < 0.0) {
                return Err(CoreError::InvalidConfig("Q must be non-negative".into()));
            }
            if n > 1 && !self.q[c].windows(2).all(|w| w[1] <= w[0]) {
                return Err(CoreError::InvalidConfig(
                    "Q must be non-increasing over the diagnostic range".into(),
                ));
            }
        }
        Ok(())
    }

    /// Effective response per channel: gain * spectrum * detector response,
    /// optionally energy-weighted.
    pub fn effective_response(&self, channel: usize) -> Vec<f64> {
        self.spectra[channel]
            .iter()
            .zip(self.detector_response[channel].iter())
            .zip(self.grid.energies_kev.iter())
            .map(|((s, d), e)| {
                let w = if self.energy_weighted { *e } else { 1.0 };
                self.gains[channel] * s * d * w
            })
            .collect()
    }

    /// Unattenuated (air scan) mean count for a channel.
    pub fn air_count(&self, channel: usize) -> f64 {
        self.effective_response(channel).iter().sum()
    }

    /// Mean detected energy of a channel's effective response, keV.
    pub fn mean_detected_energy(&self, channel: usize) -> f64 {
        let eff = self.effective_response(channel);
        let num: f64 = eff.iter().zip(self.grid.energies_kev.iter()).map(|(w, e)| w * e).sum();
        let den: f64 = eff.iter().sum();
        num / den
    }

    /// Count of active (view, channel) pairs over `n_views` views.
    pub fn active_pairs(&self, n_views: usize) -> usize {
        (0..n_views)
            .map(|v| (0..N_CHANNELS).filter(|&c| self.view_assignment.active(c, v)).count())
            .sum()
    }
}

/// Measured (or mean) counts with the diagonal Gaussian variance.
#[derive(Debug, Clone)]
pub struct SpectralSinogram {
    pub n_views: usize,
    pub n_det: usize,
    /// Per-channel counts, view-major. Inactive (view, channel) slots are 0.
    pub counts: [Vec<f64>; N_CHANNELS],
    /// Diagonal of K; 1 for inactive slots.
    pub variance: [Vec<f64>; N_CHANNELS],
    pub view_assignment: ViewAssignment,
}

impl SpectralSinogram {
    pub fn zeros(n_views: usize, n_det: usize, view_assignment: ViewAssignment) -> Self {
        let n = n_views * n_det;
        Self {
            n_views,
            n_det,
            counts: [vec![0.0; n], vec![0.0; n]],
            variance: [vec![1.0; n], vec![1.0; n]],
            view_assignment,
        }
    }

    pub fn n_rays(&self) -> usize {
        self.n_views * self.n_det
    }

    #[inline]
    pub fn active(&self, channel: usize, view: usize) -> bool {
        self.view_assignment.active(channel, view)
    }
}

// ---------------------------------------------------------------------------
// Text-config + CSV asset serialization
// ---------------------------------------------------------------------------

fn write_csv(path: &Path, energies: &[f64], values: &[f64]) -> Result<()> {
    let mut s = String::from("energy_keV,value\n");
    for (e, v) in energies.iter().zip(values.iter()) {
        s.push_str(&format!("{e},{v:.12e}\n"));
    }
    write_atomic(path, s.as_bytes())
}

fn read_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let text = std::fs::read_to_string(path)?;
    let mut energies = Vec::new();
    let mut values = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || lineno == 0 && line.starts_with("energy") {
            continue;
        }
        let (a, b) = line.split_once(',').ok_or_else(|| CoreError::Format {
            path: path.display().to_string(),
            reason: format!("line {}: expected `energy,value`", lineno + 1),
        })?;
        let parse = |s: &str| {
            s.trim().parse::<f64>().map_err(|_| CoreError::Format {
                path: path.display().to_string(),
                reason: format!("line {}: not a number", lineno + 1),
            })
        };
        energies.push(parse(a)?);
        values.push(parse(b)?);
    }
    Ok((energies, values))
}

impl SpectralSystem {
    /// Write the system as `<stem>.system` plus CSV assets next to it.
    pub fn write_config(&self, stem: &Path) -> Result<()> {
        let dir = stem.parent().unwrap_or_else(|| Path::new("."));
        let base = stem
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| CoreError::InvalidConfig("bad system stem".into()))?;
        let e = &self.grid.energies_kev;
        let asset_names = [
            format!("{base}_spectrum0.csv"),
            format!("{base}_spectrum1.csv"),
            format!("{base}_response0.csv"),
            format!("{base}_response1.csv"),
            format!("{base}_q_water.csv"),
            format!("{base}_q_calcium.csv"),
        ];
        let tables = [
            &self.spectra[0],
            &self.spectra[1],
            &self.detector_response[0],
            &self.detector_response[1],
            &self.q[0],
            &self.q[1],
        ];
        for (name, table) in asset_names.iter().zip(tables.iter()) {
            write_csv(&dir.join(name), e, table)?;
        }
        let mut meta = Metadata::new();
        meta.set("kind", self.kind.name());
        meta.set("view_assignment", self.view_assignment.name());
        meta.set("gain_0", self.gains[0]);
        meta.set("gain_1", self.gains[1]);
        meta.set("energy_weighted", self.energy_weighted);
        meta.set("bin_width_kev", self.grid.bin_width_kev);
        meta.set("spectrum_0", &asset_names[0]);
        meta.set("spectrum_1", &asset_names[1]);
        meta.set("response_0", &asset_names[2]);
        meta.set("response_1", &asset_names[3]);
        meta.set("q_water", &asset_names[4]);
        meta.set("q_calcium", &asset_names[5]);
        write_atomic(&stem.with_extension("system"), meta.to_text().as_bytes())
    }

    /// Load a system written by [`SpectralSystem::write_config`].
    pub fn read_config(path: &Path) -> Result<Self> {
        let meta = Metadata::from_text(&std::fs::read_to_string(path)?, path)?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let load = |key: &str| -> Result<(Vec<f64>, Vec<f64>)> {
            read_csv(&dir.join(meta.require(key, path)?))
        };
        let (energies, s0) = load("spectrum_0")?;
        let (e1, s1) = load("spectrum_1")?;
        let (e2, r0) = load("response_0")?;
        let (e3, r1) = load("response_1")?;
        let (e4, qw) = load("q_water")?;
        let (e5, qc) = load("q_calcium")?;
        for other in [&e1, &e2, &e3, &e4, &e5] {
            if **other != energies {
                return Err(CoreError::InvalidConfig(
                    "energy grids differ between spectrum/response/Q assets".into(),
                ));
            }
        }
        let view_assignment = match meta.require("view_assignment", path)? {
            "alternating" => ViewAssignment::Alternating,
            "all-views-both" => ViewAssignment::AllViewsBoth,
            other => {
                return Err(CoreError::InvalidConfig(format!(
                    "unknown view assignment `{other}`"
                )))
            }
        };
        let sys = Self {
            kind: SystemKind::parse(meta.require("kind", path)?)?,
            grid: EnergyGrid {
                energies_kev: energies,
                bin_width_kev: meta.parse_f64("bin_width_kev", path)?,
            },
            spectra: [s0, s1],
            detector_response: [r0, r1],
            q: [qw, qc],
            gains: [meta.parse_f64("gain_0", path)?, meta.parse_f64("gain_1", path)?],
            view_assignment,
            energy_weighted: meta.require("energy_weighted", path)? == "true",
        };
        sys.validate()?;
        Ok(sys)
    }
}
