fn main() {
    let s = sctk_core::spectral::SpectralSystem::dual_layer(2e4);
    println!("top mean E = {:.2}, bottom mean E = {:.2}", s.mean_detected_energy(0), s.mean_detected_energy(1));
}
