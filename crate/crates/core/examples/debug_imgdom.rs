use std::sync::Arc;

use sctk_core::decomposers::{image_domain_decomposition, mbmd, ImageDomainConfig, MbmdConfig};
use sctk_core::geometry::Geometry;
use sctk_core::image::MaterialImage;
use sctk_core::phantoms::{synth_phantom, PhantomRecipe, PhantomSpec};
use sctk_core::projector::Projector;
use sctk_core::spectral::{SpectralOperator, SpectralSystem};

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}

fn cylinder(size: usize, water: f64) -> MaterialImage {
    let mut img = MaterialImage::zeros(size, size, 0.8);
    for r in 0..size {
        let y = (r as f64 + 0.5) / size as f64 - 0.5;
        for c in 0..size {
            let x = (c as f64 + 0.5) / size as f64 - 0.5;
            if (x * x + y * y).sqrt() <= 0.35 {
                img.water.set(r, c, water);
            }
        }
    }
    img
}

fn interior(img: &MaterialImage, frac: f64) -> (f64, f64) {
    let size = img.height();
    let (mut sw, mut sc, mut n) = (0.0, 0.0, 0);
    for r in 0..size {
        let y = (r as f64 + 0.5) / size as f64 - 0.5;
        for c in 0..size {
            let x = (c as f64 + 0.5) / size as f64 - 0.5;
            if (x * x + y * y).sqrt() <= frac {
                sw += img.water.get(r, c);
                sc += img.calcium.get(r, c);
                n += 1;
            }
        }
    }
    (sw / n as f64, sc / n as f64)
}

fn main() {
    for (name, sys) in [
        ("dual-kvp", SpectralSystem::dual_kvp(2e4)),
        ("dual-layer", SpectralSystem::dual_layer(2e4)),
    ] {
        let geom = Geometry::desk_small(64, 180, 96);
        let op =
            SpectralOperator::new(sys, Arc::new(Projector::new(&geom).unwrap())).unwrap();
        let truth = cylinder(64, 1.0);
        let mean = op.mean_measurement(&truth).unwrap();
        let est = image_domain_decomposition(&mean, &op, &ImageDomainConfig::default()).unwrap();
        let (w, c) = interior(&est, 0.28);
        println!("{name}: cylinder interior water={w:.4} calcium={c:.4}");
    }

    // MBMD with image-domain init.
    let spec = PhantomSpec::new(PhantomRecipe::DiskInserts, 32, 0.8);
    let truth = synth_phantom(3, &spec).unwrap();
    let geom = Geometry::desk_small(32, 120, 72);
    let op = SpectralOperator::new(
        SpectralSystem::dual_kvp(2e5),
        Arc::new(Projector::new(&geom).unwrap()),
    )
    .unwrap();
    let y = op.mean_measurement(&truth).unwrap();
    let init = image_domain_decomposition(&y, &op, &ImageDomainConfig::default()).unwrap();
    println!(
        "image-domain init: water_rmse={:.4} ca_rmse={:.4}",
        rmse(&init.water.data, &truth.water.data),
        rmse(&init.calcium.data, &truth.calcium.data)
    );
    for iters in [200usize, 1000, 2000] {
        let cfg = MbmdConfig { n_iter: iters, init: Some(init.clone()), ..Default::default() };
        let res = mbmd(&y, &op, &cfg).unwrap();
        println!(
            "init=imgdom iters={iters:5} obj_last={:.4e} water_rmse={:.4} ca_rmse={:.4}",
            res.trace.last().unwrap(),
            rmse(&res.estimate.water.data, &truth.water.data),
            rmse(&res.estimate.calcium.data, &truth.calcium.data),
        );
    }
}
