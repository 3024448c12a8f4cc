//! Parametric mass attenuation tables and x-ray source spectra.
//!
//! Tables are generated from a two-term model: Klein-Nishina scattering
//! per electron plus a photoelectric term anchored at 30 keV falling as
//! 1/E^3. Constants are tuned to land near tabulated values in the
//! diagnostic range; the toolkit's tests rely on internal consistency of
//! these tables, not on agreement with any particular physical database.
//! Both terms decrease with energy, so every table is strictly decreasing
//! over the grid.

/// Electron rest energy, keV.
const ELECTRON_REST_KEV: f64 = 510.998_95;
/// Classical electron radius, cm.
const R_E_CM: f64 = 2.817_940_3e-13;

/// Klein-Nishina total cross-section per electron (cm^2) at energy `kev`.
pub fn klein_nishina_cm2(kev: f64) -> f64 {
    let a = kev / ELECTRON_REST_KEV;
    let l = (1.0 + 2.0 * a).ln();
    2.0 * std::f64::consts::PI
        * R_E_CM
        * R_E_CM
        * ((1.0 + a) / (a * a) * (2.0 * (1.0 + a) / (1.0 + 2.0 * a) - l / a)
            + l / (2.0 * a)
            - (1.0 + 3.0 * a) / (1.0 + 2.0 * a).powi(2))
}

/// Materials with built-in attenuation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Material {
    Water,
    Calcium,
    CesiumIodide,
    Aluminum,
}

impl Material {
    /// Electrons per gram.
    fn electrons_per_gram(self) -> f64 {
        match self {
            Material::Water => 3.343e23,
            Material::Calcium => 3.005e23,
            Material::CesiumIodide => 2.503e23,
            Material::Aluminum => 2.902e23,
        }
    }

    /// Photoelectric mass attenuation at 30 keV (cm^2/g); folds in the
    /// coherent contribution.
    fn photoelectric_at_30kev(self) -> f64 {
        match self {
            Material::Water => 0.165,
            Material::Calcium => 1.00,
            Material::CesiumIodide => 6.0,
            Material::Aluminum => 0.95,
        }
    }

    /// Bulk density (g/cm^3) used for filter/scintillator thicknesses.
    pub fn density(self) -> f64 {
        match self {
            Material::Water => 1.0,
            Material::Calcium => 1.55,
            Material::CesiumIodide => 4.51,
            Material::Aluminum => 2.699,
        }
    }
}

/// Mass attenuation coefficient (cm^2/g) at `kev`.
///
/// Cesium iodide carries a parametric K-edge near 35 keV: the
/// photoelectric term jumps by a fixed factor above the edge, which is
/// what gives a stacked-scintillator detector its low/high energy
/// separation. The water/calcium basis tables remain monotone.
pub fn mass_attenuation(material: Material, kev: f64) -> f64 {
    let compton = material.electrons_per_gram() * klein_nishina_cm2(kev);
    let mut pe = material.photoelectric_at_30kev() * (30.0 / kev).powi(3);
    if material == Material::CesiumIodide && kev >= CSI_K_EDGE_KEV {
        pe *= CSI_K_EDGE_JUMP;
    }
    compton + pe
}

/// K-edge position (keV) and photoelectric jump of the CsI model.
pub const CSI_K_EDGE_KEV: f64 = 35.0;
pub const CSI_K_EDGE_JUMP: f64 = 5.0;

/// Mass attenuation sampled over an energy list.
pub fn attenuation_table(material: Material, energies: &[f64]) -> Vec<f64> {
    energies.iter().map(|&e| mass_attenuation(material, e)).collect()
}

/// Kramers-law bremsstrahlung fluence with aluminum filtration, normalized
/// so the bin sum equals `total_photons`. Zero above the tube voltage.
pub fn kramers_spectrum(
    kvp: f64,
    filtration_al_cm: f64,
    energies: &[f64],
    total_photons: f64,
) -> Vec<f64> {
    let rho_al = Material::Aluminum.density();
    let mut s: Vec<f64> = energies
        .iter()
        .map(|&e| {
            if e >= kvp {
                0.0
            } else {
                let fluence = (kvp - e) / e;
                let filter = (-mass_attenuation(Material::Aluminum, e) * rho_al * filtration_al_cm)
                    .exp();
                fluence * filter
            }
        })
        .collect();
    let sum: f64 = s.iter().sum();
    if sum > 0.0 {
        for v in s.iter_mut() {
            *v *= total_photons / sum;
        }
    }
    s
}

/// Absorbed fraction of a CsI layer of the given thickness (cm).
pub fn csi_absorbed_fraction(thickness_cm: f64, energies: &[f64]) -> Vec<f64> {
    let rho = Material::CesiumIodide.density();
    energies
        .iter()
        .map(|&e| 1.0 - (-mass_attenuation(Material::CesiumIodide, e) * rho * thickness_cm).exp())
        .collect()
}

/// Transmitted fraction through a CsI layer of the given thickness (cm).
pub fn csi_transmitted_fraction(thickness_cm: f64, energies: &[f64]) -> Vec<f64> {
    let rho = Material::CesiumIodide.density();
    energies
        .iter()
        .map(|&e| (-mass_attenuation(Material::CesiumIodide, e) * rho * thickness_cm).exp())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_attenuation_strictly_decreasing() {
        let energies: Vec<f64> = (10..150).map(|e| e as f64 + 0.5).collect();
        for m in [Material::Water, Material::Calcium, Material::Aluminum] {
            let t = attenuation_table(m, &energies);
            assert!(t.iter().all(|&v| v > 0.0));
            assert!(
                t.windows(2).all(|w| w[1] < w[0]),
                "{m:?} table not strictly decreasing"
            );
        }
    }

    #[test]
    fn csi_has_a_k_edge() {
        let below = mass_attenuation(Material::CesiumIodide, CSI_K_EDGE_KEV - 0.5);
        let above = mass_attenuation(Material::CesiumIodide, CSI_K_EDGE_KEV + 0.5);
        assert!(above > 2.0 * below, "edge jump missing: {below} -> {above}");
    }

    #[test]
    fn water_attenuation_in_plausible_range() {
        // Loose sanity band around tabulated water values.
        let v60 = mass_attenuation(Material::Water, 60.0);
        assert!((0.15..0.30).contains(&v60), "water at 60 keV: {v60}");
        let v30 = mass_attenuation(Material::Water, 30.0);
        assert!((0.30..0.45).contains(&v30), "water at 30 keV: {v30}");
    }

    #[test]
    fn kramers_normalization_and_cutoff() {
        let energies: Vec<f64> = (10..150).map(|e| e as f64 + 0.5).collect();
        let s = kramers_spectrum(80.0, 0.25, &energies, 1e5);
        let sum: f64 = s.iter().sum();
        assert!((sum - 1e5).abs() < 1e-6 * 1e5);
        for (e, v) in energies.iter().zip(s.iter()) {
            if *e >= 80.0 {
                assert_eq!(*v, 0.0);
            }
        }
        // Filtration suppresses the lowest bins relative to mid-range.
        assert!(s[0] < s[40]);
    }

    #[test]
    fn csi_fractions_partition_unity() {
        let energies = [20.0, 60.0, 100.0];
        let a = csi_absorbed_fraction(0.03, &energies);
        let t = csi_transmitted_fraction(0.03, &energies);
        for i in 0..energies.len() {
            assert!((a[i] + t[i] - 1.0).abs() < 1e-12);
            assert!(a[i] > 0.0 && a[i] < 1.0);
        }
    }
}
