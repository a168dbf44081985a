//! Probe: sigma_lb as a function of the model displacement for one aligned pair.
use rae_core::accuracy::*;
use rae_core::noise::{NoiseConfig, NoiseModel};
use rae_core::raster::Fragment;
use rae_core::synth::gen_fbm;
use rae_core::geometry::Point;

fn main() {
    let f = gen_fbm(17, 17, 0.5, 10.0, 1);
    let frag = Fragment { size: 17, values: f.data().to_vec(), mask: vec![false; 289] };
    let noise = NoiseConfig { reference: NoiseModel::additive(35.0), template: NoiseModel::additive(35.0) };
    let cfg = AccuracyConfig::default();
    for d in [0.0, 0.5, 2.0, 8.0, 30.0] {
        match evaluate_pc(&frag, &frag, &noise, Point::new(d, 0.0), &cfg) {
            Ok(r) => println!("d={d:>5}: sigma_lb={:.4} validated={}", r.estimate.sigma_lb, r.estimate.validated),
            Err(e) => println!("d={d:>5}: error {e}"),
        }
    }
}
