use std::sync::Arc;
use sctk_core::decomposers::{mbmd, MbmdConfig};
use sctk_core::geometry::Geometry;
use sctk_core::phantoms::{synth_phantom, PhantomRecipe, PhantomSpec};
use sctk_core::projector::Projector;
use sctk_core::spectral::{sample_measurement, SpectralOperator, SpectralSystem};

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}
fn tv(p: &sctk_core::image::ImagePlane) -> f64 { sctk_core::decomposers::roughness(p).sqrt() }

fn main() {
    // Single continuous 1200-iteration run at 64x64 (the unit-test setup).
    let spec = PhantomSpec::new(PhantomRecipe::DiskInserts, 64, 0.8);
    let truth = synth_phantom(3, &spec).unwrap();
    let geom = Geometry::desk_small(64, 181, 96);
    let op = SpectralOperator::new(SpectralSystem::dual_kvp(2e4), Arc::new(Projector::new(&geom).unwrap())).unwrap();
    let y = op.mean_measurement(&truth).unwrap();
    let cfg = MbmdConfig { n_iter: 1200, ..Default::default() };
    let res = mbmd(&y, &op, &cfg).unwrap();
    println!("single-run 1200: obj={:.3e} water_rmse={:.4} ca_rmse={:.4}",
        res.trace.last().unwrap(),
        rmse(&res.estimate.water.data, &truth.water.data),
        rmse(&res.estimate.calcium.data, &truth.calcium.data));

    // Flatten test magnitudes at 32x32.
    let spec = PhantomSpec::new(PhantomRecipe::RandomBlobs, 32, 0.8);
    let truth = synth_phantom(5, &spec).unwrap();
    let geom = Geometry::desk_small(32, 120, 72);
    let op = SpectralOperator::new(SpectralSystem::dual_kvp(2e4), Arc::new(Projector::new(&geom).unwrap())).unwrap();
    let mean = op.mean_measurement(&truth).unwrap();
    let y = sample_measurement(&mean, 1).unwrap();
    for iters in [150usize, 400] {
        let run = |lw: f64, lc: f64| {
            let cfg = MbmdConfig { lambda_water: lw, lambda_calcium: lc, n_iter: iters, init: None, clamp_output: false };
            mbmd(&y, &op, &cfg).unwrap().estimate
        };
        let weak = run(1e-4, 4e-4);
        let strong = run(1e6, 1e6);
        println!("iters={iters}: weak TV w={:.3} c={:.3}; strong TV w={:.5} c={:.5}; ratios w={:.4} c={:.4}",
            tv(&weak.water), tv(&weak.calcium), tv(&strong.water), tv(&strong.calcium),
            tv(&strong.water)/tv(&weak.water), tv(&strong.calcium)/tv(&weak.calcium));
    }
}
