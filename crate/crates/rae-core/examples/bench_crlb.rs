// quick benchmark of evaluate_pc cost at crlb_box 13 and 17
use rae_core::accuracy::*;
use rae_core::noise::{NoiseConfig, NoiseModel};
use rae_core::raster::Fragment;
use rae_core::synth::gen_fbm;
use rae_core::geometry::Point;
use std::time::Instant;

fn main() {
    let field_r = gen_fbm(17, 17, 0.5, 10.0, 1);
    let field_t = gen_fbm(17, 17, 0.5, 10.0, 1);
    let fr = Fragment { size: 17, values: field_r.data().to_vec(), mask: vec![false; 289] };
    let ft = Fragment { size: 17, values: field_t.data().to_vec(), mask: vec![false; 289] };
    let noise = NoiseConfig { reference: NoiseModel::additive(4.0), template: NoiseModel::additive(4.0) };
    for bx in [11usize, 13, 15, 17] {
        let mut cfg = AccuracyConfig::default();
        cfg.crlb_box = bx;
        let t0 = Instant::now();
        let n = 5;
        for i in 0..n {
            let d = Point::new(0.1 + i as f64*0.01, -0.2);
            let _ = evaluate_pc(&fr, &ft, &noise, d, &cfg);
        }
        println!("box {bx}: {:.1} ms/eval", t0.elapsed().as_secs_f64()*1000.0/n as f64);
    }
    // report sigma for sanity
    let cfg = AccuracyConfig::default();
    let r = evaluate_pc(&fr, &ft, &noise, Point::new(0.1, -0.2), &cfg).unwrap();
    println!("identical-texture pair: sigma_lb={:.4} validated={} k={:.3} H={:.3} sx={:.2}", r.estimate.sigma_lb, r.estimate.validated, r.texture.k_rt, r.texture.hurst, r.texture.sigma_x_ref);
}
