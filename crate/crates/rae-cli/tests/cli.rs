//! End-to-end tests of the command-line surface: exit codes, output files,
//! and the reproducibility contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rae_core::geometry::{Point, PolynomialTransform, TransformJson};
use rae_core::noise::{NoiseConfig, NoiseModel};
use rae_core::raster::{load_raster_data, sniff_format, write_f32, write_meta, GeoMeta, Raster};
use rae_core::synth::gen_fbm;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_rae")
}

fn tmpdir(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("rae-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn rae")
}

fn north_up_meta(dims: (usize, usize), sd: f64) -> GeoMeta {
    GeoMeta {
        corner_lonlat: [
            (10.0, 50.0),
            (10.0 + 1e-4 * (dims.1 - 1) as f64, 50.0),
            (10.0, 50.0 - 1e-4 * (dims.0 - 1) as f64),
            (
                10.0 + 1e-4 * (dims.1 - 1) as f64,
                50.0 - 1e-4 * (dims.0 - 1) as f64,
            ),
        ],
        geopos_sd: sd,
    }
}

fn write_noise(path: &Path) {
    NoiseConfig {
        reference: NoiseModel {
            sa2: 1.0,
            sp2: 0.0,
            smu2: 0.0,
            sc: 0.0,
        },
        template: NoiseModel {
            sa2: 1.0,
            sp2: 0.0,
            smu2: 0.0,
            sc: 0.0,
        },
    }
    .save(path)
    .unwrap();
}

/// Identical rasters with identity metadata register to the identity.
#[test]
fn register_self_is_identity() {
    let d = tmpdir("self");
    let img = gen_fbm(136, 136, 0.5, 10.0, 5);
    let meta = north_up_meta((136, 136), 2.0);
    for name in ["ref.f32", "tmpl.f32"] {
        write_f32(&d.join(name), &img).unwrap();
        write_meta(&d.join(name), &meta, None).unwrap();
    }
    write_noise(&d.join("noise.json"));
    let out = d.join("out");
    let o = run(&[
        "--seed",
        "9",
        "--out",
        out.to_str().unwrap(),
        "register",
        "--reference",
        d.join("ref.f32").to_str().unwrap(),
        "--template",
        d.join("tmpl.f32").to_str().unwrap(),
        "--noise",
        d.join("noise.json").to_str().unwrap(),
    ]);
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    let tj: TransformJson =
        serde_json::from_str(&std::fs::read_to_string(out.join("transform.json")).unwrap())
            .unwrap();
    let t = tj.to_transform().unwrap();
    let id = PolynomialTransform::identity(1);
    for &(i, j) in &[(0.0, 0.0), (0.0, 135.0), (135.0, 0.0), (135.0, 135.0)] {
        let x = Point::new(i, j);
        let err = (t.eval(x) - id.eval(x)).norm();
        assert!(err < 1e-3, "identity deviation {err} at ({i},{j})");
    }
    assert!(tj.cov.is_some());
    for f in [
        "correspondences.csv",
        "progress.log",
        "report.json",
        "sigma_reg.f32",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
}

#[test]
fn register_missing_sidecar_is_input_error() {
    let d = tmpdir("nosidecar");
    let img = gen_fbm(40, 40, 0.5, 5.0, 1);
    write_f32(&d.join("ref.f32"), &img).unwrap();
    write_f32(&d.join("tmpl.f32"), &img).unwrap();
    // Sidecar only for the reference.
    write_meta(&d.join("ref.f32"), &north_up_meta((40, 40), 1.0), None).unwrap();
    write_noise(&d.join("noise.json"));
    let o = run(&[
        "--out",
        d.join("out").to_str().unwrap(),
        "register",
        "--reference",
        d.join("ref.f32").to_str().unwrap(),
        "--template",
        d.join("tmpl.f32").to_str().unwrap(),
        "--noise",
        d.join("noise.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("missing metadata"), "stderr: {err}");
}

#[test]
fn predict_matches_quadratic_form_and_stride() {
    let d = tmpdir("predict");
    let tj = TransformJson {
        degree: 1,
        c1: vec![0.0, 1.0, 0.0],
        c2: vec![0.0, 0.0, 1.0],
        cov: Some(vec![
            vec![0.04, 0.0, 0.0],
            vec![0.0, 1e-6, 0.0],
            vec![0.0, 0.0, 4e-6],
        ]),
    };
    std::fs::write(d.join("t.json"), serde_json::to_string(&tj).unwrap()).unwrap();
    let out1 = d.join("s1");
    let o = run(&[
        "--out",
        out1.to_str().unwrap(),
        "predict",
        "--transform",
        d.join("t.json").to_str().unwrap(),
        "--rows",
        "64",
        "--cols",
        "64",
        "--stride",
        "1",
    ]);
    assert!(o.status.success());
    let m1 = load_raster_data(
        &out1.join("sigma_reg.f32"),
        sniff_format(&out1.join("sigma_reg.f32")).unwrap(),
    )
    .unwrap();
    for &(i, j) in &[(0usize, 0usize), (10, 20), (63, 63)] {
        let expect =
            (0.04 + 1e-6 * (i * i) as f64 + 4e-6 * (j * j) as f64).sqrt();
        let got = m1.get(i, j);
        assert!(
            (got - expect).abs() < 1e-6,
            "({i},{j}): {got} vs {expect}"
        );
    }

    let out8 = d.join("s8");
    let o = run(&[
        "--out",
        out8.to_str().unwrap(),
        "predict",
        "--transform",
        d.join("t.json").to_str().unwrap(),
        "--rows",
        "64",
        "--cols",
        "64",
        "--stride",
        "8",
    ]);
    assert!(o.status.success());
    let m8 = load_raster_data(
        &out8.join("sigma_reg.f32"),
        sniff_format(&out8.join("sigma_reg.f32")).unwrap(),
    )
    .unwrap();
    assert_eq!(m8.dims(), (8, 8));
    for a in 0..8 {
        for b in 0..8 {
            assert_eq!(m8.get(a, b), m1.get(a * 8, b * 8));
        }
    }
    assert!(out8.join("isolines.csv").exists());
}

#[test]
fn predict_without_cov_is_input_error() {
    let d = tmpdir("nocov");
    let tj = TransformJson {
        degree: 1,
        c1: vec![0.0, 1.0, 0.0],
        c2: vec![0.0, 0.0, 1.0],
        cov: None,
    };
    std::fs::write(d.join("t.json"), serde_json::to_string(&tj).unwrap()).unwrap();
    let o = run(&[
        "--out",
        d.join("out").to_str().unwrap(),
        "predict",
        "--transform",
        d.join("t.json").to_str().unwrap(),
        "--rows",
        "32",
        "--cols",
        "32",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_bundled_mono_easy() {
    let spec = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs/mono_easy.json");
    let d = tmpdir("sim");
    let o = run(&[
        "--out",
        d.to_str().unwrap(),
        "simulate",
        "--spec",
        spec.to_str().unwrap(),
    ]);
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["success"], serde_json::Value::Bool(true));
    let rmse = metrics["probe_rmse"].as_f64().unwrap();
    assert!(rmse < 0.5, "probe RMSE {rmse}");
    for f in ["histogram.csv", "trace.csv", "truth.json", "template.f32"] {
        assert!(d.join(f).exists(), "{f} missing");
    }
}

#[test]
fn simulate_malformed_spec_is_input_error() {
    let d = tmpdir("badspec");
    std::fs::write(d.join("bad.json"), "{\"size\": [0]").unwrap();
    let o = run(&[
        "--out",
        d.to_str().unwrap(),
        "simulate",
        "--spec",
        d.join("bad.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn crlb_identical_vs_independent_fragments() {
    let d = tmpdir("crlb");
    write_noise(&d.join("noise.json"));
    let a = gen_fbm(17, 17, 0.5, 10.0, 7);
    let b = gen_fbm(17, 17, 0.5, 10.0, 8);
    write_f32(&d.join("a.f32"), &a).unwrap();
    write_f32(&d.join("b.f32"), &b).unwrap();

    let o = run(&[
        "crlb",
        "--ref-fragment",
        d.join("a.f32").to_str().unwrap(),
        "--tmpl-fragment",
        d.join("a.f32").to_str().unwrap(),
        "--noise",
        d.join("noise.json").to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("validated=true"), "{out}");

    let o = run(&[
        "crlb",
        "--ref-fragment",
        d.join("a.f32").to_str().unwrap(),
        "--tmpl-fragment",
        d.join("b.f32").to_str().unwrap(),
        "--noise",
        d.join("noise.json").to_str().unwrap(),
    ]);
    // Independent fragments: either rejected outright or unbounded.
    if o.status.success() {
        let out = String::from_utf8_lossy(&o.stdout);
        assert!(out.contains("validated=false"), "{out}");
    } else {
        assert_eq!(o.status.code(), Some(1));
    }

    // Constant fragment cannot be modeled.
    let c = Raster::from_fn(17, 17, |_, _| 3.0);
    write_f32(&d.join("c.f32"), &c).unwrap();
    let o = run(&[
        "crlb",
        "--ref-fragment",
        d.join("c.f32").to_str().unwrap(),
        "--tmpl-fragment",
        d.join("c.f32").to_str().unwrap(),
        "--noise",
        d.join("noise.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

/// Identical seed and different thread counts produce bytewise-identical
/// transforms.
#[test]
fn register_is_thread_count_invariant() {
    let d = tmpdir("threads");
    let spec_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs/mono_easy.json");
    let spec = rae_core::synth::SynthSpec::load(&spec_path).unwrap();
    let pair = rae_core::synth::gen_pair(&spec).unwrap();
    write_f32(&d.join("ref.f32"), &pair.reference).unwrap();
    write_meta(&d.join("ref.f32"), &pair.ref_meta, None).unwrap();
    write_f32(&d.join("tmpl.f32"), &pair.template).unwrap();
    write_meta(&d.join("tmpl.f32"), &pair.tmpl_meta, None).unwrap();
    write_noise(&d.join("noise.json"));

    let mut bytes = Vec::new();
    for threads in ["1", "4"] {
        let out = d.join(format!("out{threads}"));
        let o = run(&[
            "--seed",
            "42",
            "--threads",
            threads,
            "--deterministic",
            "--out",
            out.to_str().unwrap(),
            "register",
            "--reference",
            d.join("ref.f32").to_str().unwrap(),
            "--template",
            d.join("tmpl.f32").to_str().unwrap(),
            "--noise",
            d.join("noise.json").to_str().unwrap(),
        ]);
        assert!(
            o.status.success(),
            "threads={threads} stderr: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        bytes.push(std::fs::read(out.join("transform.json")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1], "transform differs across thread counts");
}
