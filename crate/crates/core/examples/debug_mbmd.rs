use std::sync::Arc;

use sctk_core::decomposers::{mbmd, MbmdConfig};
use sctk_core::geometry::Geometry;
use sctk_core::phantoms::{synth_phantom, PhantomRecipe, PhantomSpec};
use sctk_core::projector::Projector;
use sctk_core::spectral::{SpectralOperator, SpectralSystem};

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}

fn main() {
    let spec = PhantomSpec::new(PhantomRecipe::DiskInserts, 32, 0.8);
    let truth = synth_phantom(3, &spec).unwrap();
    let geom = Geometry::desk_small(32, 120, 72);
    let op = SpectralOperator::new(
        SpectralSystem::dual_kvp(2e5),
        Arc::new(Projector::new(&geom).unwrap()),
    )
    .unwrap();
    let y = op.mean_measurement(&truth).unwrap();
    for iters in [50usize, 200, 500, 1000] {
        let cfg = MbmdConfig { n_iter: iters, ..Default::default() };
        let res = mbmd(&y, &op, &cfg).unwrap();
        println!(
            "iters={iters:5} obj_first={:.4e} obj_last={:.4e} water_rmse={:.4} ca_rmse={:.4} w_mean={:.3} ca_mean={:.3}",
            res.trace[0],
            res.trace.last().unwrap(),
            rmse(&res.estimate.water.data, &truth.water.data),
            rmse(&res.estimate.calcium.data, &truth.calcium.data),
            res.estimate.water.mean(),
            res.estimate.calcium.mean(),
        );
    }
}
