//! Probe sigma_norm over scene parameterizations.
use rae_core::geometry::{Point, TransformJson};
use rae_core::noise::{NoiseConfig, NoiseModel};
use rae_core::pipeline::{run, PipelineConfig};
use rae_core::raster::TilingConfig;
use rae_core::synth::{evaluate, gen_pair, InlierSample, SynthSpec};

fn main() {
    let a = 1f64.to_radians();
    let warp = TransformJson { degree: 1, c1: vec![16.0, a.cos(), a.sin()], c2: vec![-12.0, -a.sin(), a.cos()], cov: None };
    let cases: Vec<(&str, f64, f64, f64, f64)> = vec![
        // (label, hurst, k, sa2, sc)
        ("k95 white snr10 H.5", 0.5, 0.95, 35.0, 0.0),
        ("k-.5 white heavy H.5", 0.5, -0.5, 70.0, 0.0),
        ("k-.5 corr1.2 heavy H.5", 0.5, -0.5, 70.0, 1.2),
        ("k95 corr1.2 snr10 H.5", 0.5, 0.95, 35.0, 1.2),
        ("k-.5 corr1.2 heavy H.35", 0.35, -0.5, 70.0, 1.2),
        ("k.7 corr1.6 vheavy H.4", 0.4, 0.7, 150.0, 1.6),
    ];
    for (label, h, k, sa2, sc) in cases {
        let spec = SynthSpec {
            size: (340, 340), hurst: h, sigma_x: 10.0, k_rt_target: k,
            warp: warp.clone(),
            noise_ref: NoiseModel { sa2, sp2: 0.0, smu2: 0.0, sc },
            noise_tmpl: NoiseModel { sa2, sp2: 0.0, smu2: 0.0, sc },
            outlier_cf_fraction: 0.0, seed: 5, tiling: TilingConfig::default(),
        };
        let pair = gen_pair(&spec).unwrap();
        let noise = NoiseConfig { reference: spec.noise_ref, template: spec.noise_tmpl };
        let cfg = PipelineConfig { seed: 5, d_max0_override: Some(45.0), ..Default::default() };
        match run(&pair.reference, &pair.template, &pair.ref_meta, &pair.tmpl_meta, &noise, &cfg) {
            Ok(out) => {
                let truth = pair.truth.warp_transform();
                let inl: Vec<InlierSample> = out.inliers.iter().map(|&(x, y, s)| InlierSample { x, y, sigma_lb: s }).collect();
                let m = evaluate(&out.transform, Some(&out.r_c), &inl, &truth, spec.size);
                println!("{label:28} inliers {:4} sigma_norm {:.2} global {:?} probe_rmse {:.3} max {:.3}",
                    m.n_inliers, m.sigma_norm, m.global_norm_sd.map(|v| (v*100.0).round()/100.0), m.probe_rmse, m.probe_max);
            }
            Err(e) => println!("{label:28} FAILED: {e}"),
        }
    }
}
