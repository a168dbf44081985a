//! Seeded synthetic ground-truth generator and evaluation metrics.
//!
//! Texture fields are produced by spectral synthesis (power spectrum
//! proportional to `f^-(2H+2)`) and normalized so the empirical
//! unit-distance increment SD matches the requested value. A registration
//! pair shares texture through the mixing identity
//! `mix = k * A + sqrt(1 - k^2) * B`, which reaches the target
//! cross-correlation in expectation; the template is the mixture resampled
//! through the ground-truth warp, with a seeded subset of fragment tiles
//! replaced by independent texture to act as planted outliers.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::RaeError;
use crate::geometry::{monomials, Point, PolynomialTransform, TransformJson};
use crate::noise::{sample_noise_field, NoiseModel};
use crate::raster::{GeoMeta, Raster, TilingConfig};
use crate::Result;

/// Specification of one synthetic registration scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Template (and reference) size as (rows, cols).
    pub size: (usize, usize),
    /// Hurst exponent of the shared texture, in (0, 1).
    pub hurst: f64,
    /// Unit-distance increment SD of the texture.
    pub sigma_x: f64,
    /// Target reference/template cross-correlation in [-1, 1]; negative
    /// values produce an intensity-inverted template.
    pub k_rt_target: f64,
    /// Ground-truth template-to-reference transform.
    pub warp: TransformJson,
    pub noise_ref: NoiseModel,
    pub noise_tmpl: NoiseModel,
    /// Fraction of control fragments replaced by independent texture.
    pub outlier_cf_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub tiling: TilingConfig,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.hurst > 0.0 && self.hurst < 1.0) {
            return Err(RaeError::InvalidConfig("hurst must be in (0,1)".into()));
        }
        if !(self.sigma_x > 0.0) {
            return Err(RaeError::InvalidConfig("sigma_x must be > 0".into()));
        }
        if self.k_rt_target.abs() > 1.0 {
            return Err(RaeError::InvalidConfig(
                "k_rt_target must be in [-1,1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.outlier_cf_fraction) {
            return Err(RaeError::InvalidConfig(
                "outlier_cf_fraction must be in [0,1]".into(),
            ));
        }
        self.noise_ref.validate()?;
        self.noise_tmpl.validate()?;
        self.tiling.validate()?;
        let warp = self.warp.to_transform()?;
        // Invertibility probe: positive Jacobian determinant over the domain.
        let (rows, cols) = self.size;
        for r in 0..5 {
            for c in 0..5 {
                let x = Point::new(
                    r as f64 * (rows - 1) as f64 / 4.0,
                    c as f64 * (cols - 1) as f64 / 4.0,
                );
                if warp.jacobian(x).determinant() <= 0.0 {
                    return Err(RaeError::InvalidConfig(
                        "warp not invertible on domain".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let spec: SynthSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Ground-truth record emitted alongside a generated pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthRecord {
    pub warp: TransformJson,
    pub outlier_cfs: Vec<usize>,
    pub n_cf: usize,
    pub seed: u64,
}

impl TruthRecord {
    pub fn warp_transform(&self) -> PolynomialTransform {
        self.warp.to_transform().expect("truth warp is valid")
    }

    pub fn is_outlier(&self, cf_index: usize) -> bool {
        self.outlier_cfs.binary_search(&cf_index).is_ok()
    }
}

/// A generated scene: rasters, identical coarse-registration metadata for
/// both images (the true warp is the planted geolocation error), and truth.
#[derive(Debug, Clone)]
pub struct SynthPair {
    pub reference: Raster,
    pub template: Raster,
    pub ref_meta: GeoMeta,
    pub tmpl_meta: GeoMeta,
    pub truth: TruthRecord,
}

/// Generate an fBm-like field by spectral synthesis, normalized so the
/// empirical unit-distance increment SD equals `sigma_x` exactly.
pub fn gen_fbm(rows: usize, cols: usize, hurst: f64, sigma_x: f64, seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = vec![Complex::new(0.0, 0.0); rows * cols];
    for ki in 0..rows {
        let fi = (ki.min(rows - ki)) as f64 / rows as f64;
        for kj in 0..cols {
            let fj = (kj.min(cols - kj)) as f64 / cols as f64;
            let f = (fi * fi + fj * fj).sqrt();
            // Draw both Gaussians unconditionally to keep the stream layout
            // independent of the frequency grid.
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            if f > 0.0 {
                let amp = f.powf(-(hurst + 1.0));
                spec[ki * cols + kj] = Complex::new(re * amp, im * amp);
            }
        }
    }
    ifft2(&mut spec, rows, cols);
    let field: Vec<f64> = spec.iter().map(|c| c.re).collect();

    // Empirical unit-distance increment SD over both axes.
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in 0..rows {
        for c in 0..cols - 1 {
            let d = field[r * cols + c + 1] - field[r * cols + c];
            sum += d * d;
            count += 1;
        }
    }
    for r in 0..rows - 1 {
        for c in 0..cols {
            let d = field[(r + 1) * cols + c] - field[r * cols + c];
            sum += d * d;
            count += 1;
        }
    }
    let emp = (sum / count as f64).sqrt();
    let gain = if emp > 0.0 { sigma_x / emp } else { 0.0 };
    Raster::new(rows, cols, field.iter().map(|v| v * gain).collect()).expect("finite field")
}

fn ifft2(data: &mut [Complex<f64>], rows: usize, cols: usize) {
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_inverse(cols);
    for r in 0..rows {
        row_fft.process(&mut data[r * cols..(r + 1) * cols]);
    }
    let col_fft = planner.plan_fft_inverse(rows);
    let mut col = vec![Complex::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            col[r] = data[r * cols + c];
        }
        col_fft.process(&mut col);
        for r in 0..rows {
            data[r * cols + c] = col[r];
        }
    }
}

/// Plain (noise-free) isotropic structure function of a raster at integer
/// lags, used by the generator tests and normalization checks.
pub fn structure_function(raster: &Raster, lags: &[usize]) -> Vec<f64> {
    let (rows, cols) = raster.dims();
    lags.iter()
        .map(|&lag| {
            let mut sum = 0.0;
            let mut n = 0usize;
            for r in 0..rows {
                for c in 0..cols.saturating_sub(lag) {
                    let d = raster.get(r, c + lag) - raster.get(r, c);
                    sum += d * d;
                    n += 1;
                }
            }
            for r in 0..rows.saturating_sub(lag) {
                for c in 0..cols {
                    let d = raster.get(r + lag, c) - raster.get(r, c);
                    sum += d * d;
                    n += 1;
                }
            }
            sum / n as f64
        })
        .collect()
}

/// Generate a registration pair with ground truth.
pub fn gen_pair(spec: &SynthSpec) -> Result<SynthPair> {
    spec.validate()?;
    let warp = spec.warp.to_transform()?;
    let (rows, cols) = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let seed_a: u64 = rng.gen();
    let seed_b: u64 = rng.gen();
    let seed_out_tex: u64 = rng.gen();
    let seed_noise_ref: u64 = rng.gen();
    let seed_noise_tmpl: u64 = rng.gen();
    let seed_pick: u64 = rng.gen();

    // Extended reference-frame domain covering the image and the warped
    // template with an interpolation margin.
    let mut lo = Point::new(0.0, 0.0);
    let mut hi = Point::new((rows - 1) as f64, (cols - 1) as f64);
    for r in 0..9 {
        for c in 0..9 {
            let x = Point::new(
                r as f64 * (rows - 1) as f64 / 8.0,
                c as f64 * (cols - 1) as f64 / 8.0,
            );
            let y = warp.eval(x);
            lo.x = lo.x.min(y.x);
            lo.y = lo.y.min(y.y);
            hi.x = hi.x.max(y.x);
            hi.y = hi.y.max(y.y);
        }
    }
    let margin = 6.0;
    let off = Point::new((lo.x - margin).floor(), (lo.y - margin).floor());
    let ext_rows = ((hi.x + margin).ceil() - off.x) as usize + 1;
    let ext_cols = ((hi.y + margin).ceil() - off.y) as usize + 1;

    let base = gen_fbm(ext_rows, ext_cols, spec.hurst, spec.sigma_x, seed_a);
    let indep = gen_fbm(ext_rows, ext_cols, spec.hurst, spec.sigma_x, seed_b);
    let k = spec.k_rt_target;
    let mix = Raster::from_fn(ext_rows, ext_cols, |i, j| {
        k * base.get(i, j) + (1.0 - k * k).sqrt() * indep.get(i, j)
    });

    let oi = (-off.x) as usize;
    let oj = (-off.y) as usize;
    let ref_clean = Raster::from_fn(rows, cols, |i, j| base.get(i + oi, j + oj));
    let mut tmpl_clean = Raster::from_fn(rows, cols, |_, _| 0.0);
    for i in 0..rows {
        for j in 0..cols {
            let y = warp.eval(Point::new(i as f64, j as f64)) - off;
            let v = mix
                .interpolate_opt(y)
                .ok_or_else(|| RaeError::InvalidConfig("warp leaves the synthetic domain".into()))?;
            tmpl_clean.data_mut()[i * cols + j] = v;
        }
    }

    // Outlier tiles: independent texture, uncorrelated with the reference.
    let cfs = crate::raster::tile(&tmpl_clean, &spec.tiling)?;
    let n_cf = cfs.len();
    let n_out = (spec.outlier_cf_fraction * n_cf as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..n_cf).collect();
    let mut pick_rng = ChaCha8Rng::seed_from_u64(seed_pick);
    for i in (1..order.len()).rev() {
        let j = pick_rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut outlier_cfs: Vec<usize> = order.into_iter().take(n_out).collect();
    outlier_cfs.sort_unstable();
    if n_out > 0 {
        let out_tex = gen_fbm(rows, cols, spec.hurst, spec.sigma_x, seed_out_tex);
        let n = spec.tiling.n_ti;
        let h = (n / 2) as i64;
        for &kcf in &outlier_cfs {
            let cf = &cfs[kcf];
            let (ci, cj) = (cf.center.x as i64, cf.center.y as i64);
            for di in -h..=h {
                for dj in -h..=h {
                    let (i, j) = ((ci + di) as usize, (cj + dj) as usize);
                    tmpl_clean.data_mut()[i * cols + j] = out_tex.get(i, j);
                }
            }
        }
    }

    let reference = sample_noise_field(&spec.noise_ref, &ref_clean, seed_noise_ref)?;
    let template = sample_noise_field(&spec.noise_tmpl, &tmpl_clean, seed_noise_tmpl)?;

    // Both metas carry identical corners: the coarse initialization is the
    // identity and the true warp plays the role of the geolocation error.
    let init_err = (0..9)
        .flat_map(|r| (0..9).map(move |c| (r, c)))
        .map(|(r, c)| {
            let x = Point::new(
                r as f64 * (rows - 1) as f64 / 8.0,
                c as f64 * (cols - 1) as f64 / 8.0,
            );
            (warp.eval(x) - x).norm()
        })
        .fold(0.0, f64::max);
    let sd = ((init_err * 1.25 + 2.0) / 3.0) / std::f64::consts::SQRT_2;
    let meta = GeoMeta {
        corner_lonlat: [
            (10.0, 50.0),
            (10.0 + 1e-4 * (cols - 1) as f64, 50.0),
            (10.0, 50.0 - 1e-4 * (rows - 1) as f64),
            (
                10.0 + 1e-4 * (cols - 1) as f64,
                50.0 - 1e-4 * (rows - 1) as f64,
            ),
        ],
        geopos_sd: sd,
    };

    Ok(SynthPair {
        reference,
        template,
        ref_meta: meta.clone(),
        tmpl_meta: meta,
        truth: TruthRecord {
            warp: spec.warp.clone(),
            outlier_cfs,
            n_cf,
            seed: spec.seed,
        },
    })
}

/// One detected inlier correspondence for metric computation.
#[derive(Debug, Clone, Copy)]
pub struct InlierSample {
    /// Template point (CF center).
    pub x: Point,
    /// Matched reference point.
    pub y: Point,
    /// Potential accuracy bound assigned to the correspondence.
    pub sigma_lb: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n_inliers: usize,
    /// RMSE of inlier positions against the truth warp, pixels.
    pub rmse_inliers: f64,
    /// SD of per-axis inlier errors normalized by sigma_lb.
    pub sigma_norm: f64,
    pub probe_mean: f64,
    pub probe_max: f64,
    pub probe_rmse: f64,
    /// SD of per-axis fitted-position errors normalized by sigma_reg;
    /// absent without a coefficient covariance.
    pub global_norm_sd: Option<f64>,
}

/// Compare a fitted transform (and optional coefficient covariance) against
/// the ground truth over the inliers and a 32x32 probe grid.
pub fn evaluate(
    fitted: &PolynomialTransform,
    cov: Option<&DMatrix<f64>>,
    inliers: &[InlierSample],
    truth: &PolynomialTransform,
    dims: (usize, usize),
) -> EvalMetrics {
    let (rows, cols) = dims;
    let mut probe_sum = 0.0;
    let mut probe_sq = 0.0;
    let mut probe_max = 0.0f64;
    let n_probe = 32;
    for r in 0..n_probe {
        for c in 0..n_probe {
            let x = Point::new(
                r as f64 * (rows - 1) as f64 / (n_probe - 1) as f64,
                c as f64 * (cols - 1) as f64 / (n_probe - 1) as f64,
            );
            let e = (fitted.eval(x) - truth.eval(x)).norm();
            probe_sum += e;
            probe_sq += e * e;
            probe_max = probe_max.max(e);
        }
    }
    let np = (n_probe * n_probe) as f64;

    let mut rmse = 0.0;
    let mut norm_sq = 0.0;
    let mut norm_n = 0usize;
    let mut glob_sq = 0.0;
    let mut glob_n = 0usize;
    for s in inliers {
        let t = truth.eval(s.x);
        let err = s.y - t;
        rmse += err.norm_squared();
        if s.sigma_lb > 0.0 {
            norm_sq += (err.x / s.sigma_lb).powi(2) + (err.y / s.sigma_lb).powi(2);
            norm_n += 2;
        }
        if let Some(rc) = cov {
            let e = monomials(fitted.degree, s.x);
            let var = (rc * &e).dot(&e);
            if var > 0.0 {
                let sreg = var.sqrt();
                let fe = fitted.eval(s.x) - t;
                glob_sq += (fe.x / sreg).powi(2) + (fe.y / sreg).powi(2);
                glob_n += 2;
            }
        }
    }
    let n_in = inliers.len();
    EvalMetrics {
        n_inliers: n_in,
        rmse_inliers: if n_in > 0 {
            (rmse / n_in as f64).sqrt()
        } else {
            f64::NAN
        },
        sigma_norm: if norm_n > 0 {
            (norm_sq / norm_n as f64).sqrt()
        } else {
            f64::NAN
        },
        probe_mean: probe_sum / np,
        probe_max,
        probe_rmse: (probe_sq / np).sqrt(),
        global_norm_sd: if glob_n > 0 {
            Some((glob_sq / glob_n as f64).sqrt())
        } else {
            None
        },
    }
}
