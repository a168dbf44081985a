//! Development harness: measures acceptance-scale behavior (runtime, error
//! metrics, bound calibration) on synthetic scenes.

use std::time::Instant;

use rae_core::geometry::{Point, PolynomialTransform, TransformJson};
use rae_core::noise::{NoiseConfig, NoiseModel};
use rae_core::pipeline::{run, PipelineConfig};
use rae_core::raster::TilingConfig;
use rae_core::synth::{evaluate, gen_pair, InlierSample, SynthSpec};

fn warp_20px_1deg() -> TransformJson {
    let a = 1f64.to_radians();
    TransformJson {
        degree: 1,
        c1: vec![16.0, a.cos(), a.sin()],
        c2: vec![-12.0, -a.sin(), a.cos()],
    cov: None,
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("c1");
    match mode {
        "c1" => criterion_run(0.95, 35.0, args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1)),
        "c2" => criterion_run(-0.5, 70.0, args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1)),
        _ => eprintln!("unknown mode"),
    }
}

fn criterion_run(k: f64, sa2: f64, seed: u64) {
    let spec = SynthSpec {
        size: (512, 512),
        hurst: 0.5,
        sigma_x: 10.0,
        k_rt_target: k,
        warp: warp_20px_1deg(),
        noise_ref: NoiseModel { sa2, sp2: 0.0, smu2: 0.0, sc: 0.0 },
        noise_tmpl: NoiseModel { sa2, sp2: 0.0, smu2: 0.0, sc: 0.0 },
        outlier_cf_fraction: 0.0,
        seed,
        tiling: TilingConfig::default(),
    };
    let t0 = Instant::now();
    let pair = gen_pair(&spec).unwrap();
    let gen_s = t0.elapsed().as_secs_f64();

    let noise = NoiseConfig { reference: spec.noise_ref, template: spec.noise_tmpl };
    let crlb_box: usize = std::env::var("CRLB_BOX")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(13);
    let mut cfg = PipelineConfig {
        seed,
        d_max0_override: Some(45.0),
        ..Default::default()
    };
    cfg.accuracy.crlb_box = crlb_box;
    let t0 = Instant::now();
    let out = match run(&pair.reference, &pair.template, &pair.ref_meta, &pair.tmpl_meta, &noise, &cfg) {
        Ok(o) => o,
        Err(e) => {
            println!("seed {seed}: FAILED {e} after {:.1}s", t0.elapsed().as_secs_f64());
            return;
        }
    };
    let run_s = t0.elapsed().as_secs_f64();

    let truth: PolynomialTransform = pair.truth.warp_transform();
    let inliers: Vec<InlierSample> = out
        .inliers
        .iter()
        .map(|&(x, y, s)| InlierSample { x, y, sigma_lb: s })
        .collect();
    let m = evaluate(&out.transform, Some(&out.r_c), &inliers, &truth, spec.size);

    // Fine-stage slope over the last decade of processed PCs.
    let n_max = out.report.progress.last().map(|p| p.processed_pcs).unwrap_or(0);
    let pts: Vec<(f64, f64)> = out
        .report
        .progress
        .iter()
        .filter(|p| p.processed_pcs * 10 >= n_max && p.processed_pcs > 0 && p.sigma_reg_mean > 0.0)
        .map(|p| ((p.processed_pcs as f64).ln(), p.sigma_reg_mean.ln()))
        .collect();
    let slope = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        (n * sxy - sx * sy) / (n * sxx - sx * sx)
    } else {
        f64::NAN
    };

    // 12-sigma coverage of the inlier errors.
    let mut cover = 0usize;
    let mut tot = 0usize;
    for s in &inliers {
        let e = s.y - truth.eval(s.x);
        for err in [e.x.abs(), e.y.abs()] {
            tot += 1;
            if err <= 12.0 * s.sigma_lb {
                cover += 1;
            }
        }
    }

    println!(
        "seed {seed}: gen {gen_s:.1}s run {run_s:.1}s | processed {} validated {} inliers {} searched {} | \
         probe max {:.3} rmse {:.3} | sigma_norm {:.2} global_norm {:?} | P_CF {:.3} | slope {slope:.3} | \
         coverage {cover}/{tot} | crlb_evals {} basis {} | sigma_lb range {:?}",
        out.report.processed_pcs,
        out.report.validated_pcs,
        m.n_inliers,
        out.report.searched_cfs,
        m.probe_max,
        m.probe_rmse,
        m.sigma_norm,
        m.global_norm_sd,
        out.report.p_cf,
        out.report.crlb_evals,
        out.report.stats.basis_evals,
        inliers
            .iter()
            .map(|s| s.sigma_lb)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |a, v| (a.0.min(v), a.1.max(v)))
    );
}
