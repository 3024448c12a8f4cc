use std::sync::Arc;
use sctk_core::decomposers::{mbmd, MbmdConfig};
use sctk_core::geometry::Geometry;
use sctk_core::image::MaterialImage;
use sctk_core::phantoms::{synth_phantom, PhantomRecipe, PhantomSpec};
use sctk_core::projector::Projector;
use sctk_core::spectral::{SpectralOperator, SpectralSystem};

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}

fn main() {
    let size: usize = std::env::args().nth(1).unwrap().parse().unwrap();
    let spec = PhantomSpec::new(PhantomRecipe::DiskInserts, size, 0.8);
    let truth = synth_phantom(3, &spec).unwrap();
    let geom = Geometry::desk_small(size, (size as f64 * 2.8) as usize, size * 3 / 2);
    let op = SpectralOperator::new(SpectralSystem::dual_kvp(2e4), Arc::new(Projector::new(&geom).unwrap())).unwrap();
    let y = op.mean_measurement(&truth).unwrap();
    let mut prev: Option<MaterialImage> = None;
    for block in 0..8 {
        let cfg = MbmdConfig { n_iter: 250, init: prev.take(), clamp_output: false, ..Default::default() };
        let res = mbmd(&y, &op, &cfg).unwrap();
        println!(
            "size={size} iters={:5} obj={:.3e} water_rmse={:.4} ca_rmse={:.4}",
            (block + 1) * 250,
            res.trace.last().unwrap(),
            rmse(&res.estimate.water.data, &truth.water.data),
            rmse(&res.estimate.calcium.data, &truth.calcium.data),
        );
        prev = Some(res.estimate);
    }
}
