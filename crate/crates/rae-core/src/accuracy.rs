//! Per-correspondence potential accuracy: texture parameter estimation, the
//! joint Gaussian fragment model, Fisher information, and the Cramér–Rao
//! lower bound on translation error.
//!
//! Both fragments are modeled as zero-mean Gaussian fields of
//! fractional-Brownian-motion increments, each anchored at its own fragment
//! center:
//!
//! `k_fbm(p, q) = 0.5 * (|p|^2H + |q|^2H - |p-q|^2H) * sigma_x^2`
//!
//! plus the spatially correlated signal-dependent noise covariance. The
//! template fragment sits displaced by `d_pc` in the shared frame, so its
//! increments are taken from the shifted anchor and the cross block becomes
//! the exact fBm increment covariance
//!
//! `0.5 * (|p-d|^2H + |q+d|^2H - |p-q-d|^2H - |d|^2H) * k * s_ref * s_tmpl`,
//!
//! which keeps the joint matrix positive semidefinite for every displacement
//! while the within-template block stays displacement-invariant: translation
//! information flows exclusively through the cross-correlation between the
//! fragments. The 6x6 Fisher information over
//! `(sigma_ref, sigma_tmpl, k_rt, H, d1, d2)` uses the zero-mean Gaussian
//! trace formula with central-difference covariance derivatives; its inverse
//! gives the bound.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::RaeError;
use crate::geometry::Point;
use crate::matcher::MIN_OVERLAP;
use crate::noise::{NoiseConfig, NoiseModel};
use crate::raster::Fragment;
use crate::Result;

/// Texture parameters of one fragment pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    /// Increment SD at unit distance, reference fragment.
    pub sigma_x_ref: f64,
    /// Increment SD at unit distance, template fragment.
    pub sigma_x_tmpl: f64,
    /// Noise-debiased fragment correlation, clamped to [-0.99, 0.99].
    pub k_rt: f64,
    /// Hurst exponent, clamped to [0.05, 0.95].
    pub hurst: f64,
}

/// Full parameter vector of the joint model: texture plus the translation
/// residual of the correspondence against the current global transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaPc {
    pub texture: TextureParams,
    pub d_pc: Point,
}

impl ThetaPc {
    fn as_array(&self) -> [f64; 6] {
        [
            self.texture.sigma_x_ref,
            self.texture.sigma_x_tmpl,
            self.texture.k_rt,
            self.texture.hurst,
            self.d_pc.x,
            self.d_pc.y,
        ]
    }

    fn from_array(v: &[f64]) -> Self {
        Self {
            texture: TextureParams {
                sigma_x_ref: v[0],
                sigma_x_tmpl: v[1],
                k_rt: v[2],
                hurst: v[3],
            },
            d_pc: Point::new(v[4], v[5]),
        }
    }
}

/// Validation outcome for one correspondence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyEstimate {
    /// Potential translation-error SD (the bound), pixels.
    pub sigma_lb: f64,
    /// Effective error SD after the estimator-efficiency correction.
    pub sigma_pc: f64,
    pub validated: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AccuracyConfig {
    /// Validation threshold on sigma_lb, pixels (strict `<`).
    pub sigma_lb_max: f64,
    /// Statistical efficiency of the matcher; sigma_pc = sigma_lb / sqrt(e).
    pub e_est: f64,
    /// Side of the central pixel box (per fragment) entering the joint model.
    pub crlb_box: usize,
    /// Absolute central-difference step for k_rt, H, d1, d2.
    pub fd_step_abs: f64,
    /// Relative step for the sigma_x parameters.
    pub fd_step_rel: f64,
    /// Diagonal jitter factor (times trace/dim) applied before inversion.
    pub jitter: f64,
    /// Minimum jointly unmasked pixels per fragment for a usable model.
    pub min_pixels: usize,
}

impl Default for AccuracyConfig {
    fn default() -> Self {
        Self {
            sigma_lb_max: 0.35,
            e_est: 0.1,
            crlb_box: 13,
            fd_step_abs: 1e-3,
            fd_step_rel: 1e-3,
            jitter: 1e-8,
            min_pixels: 100,
        }
    }
}

/// Compare the bound against the threshold and apply the efficiency
/// correction.
pub fn validate(sigma_lb: f64, cfg: &AccuracyConfig) -> AccuracyEstimate {
    AccuracyEstimate {
        sigma_lb,
        sigma_pc: sigma_lb / cfg.e_est.sqrt(),
        validated: sigma_lb < cfg.sigma_lb_max,
    }
}

/// Offsets at which the empirical structure function is evaluated, grouped
/// by squared distance: 1, sqrt2, 2, sqrt5, 3, 4.
const SF_LAGS_SQ: [i64; 6] = [1, 2, 4, 5, 9, 16];

fn lag_offsets(r2: i64) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    let rmax = (r2 as f64).sqrt() as i64 + 1;
    for di in -rmax..=rmax {
        for dj in 0..=rmax {
            // Half-plane: (di, dj) with dj > 0, or dj == 0 and di > 0.
            if dj == 0 && di <= 0 {
                continue;
            }
            if di * di + dj * dj == r2 {
                out.push((di, dj));
            }
        }
    }
    out
}

/// Noise-corrected log-log structure-function regression for one fragment.
/// Returns `(hurst_slope_half, sigma_x)` before clamping.
fn structure_regression(frag: &Fragment, noise: &NoiseModel) -> Result<(f64, f64)> {
    let h = frag.half();
    let mut xs = Vec::with_capacity(SF_LAGS_SQ.len());
    let mut ys = Vec::with_capacity(SF_LAGS_SQ.len());
    let mut raw_any = 0.0f64;
    for &r2 in &SF_LAGS_SQ {
        let r = (r2 as f64).sqrt();
        let offsets = lag_offsets(r2);
        let mut sum = 0.0;
        let mut noise_sum = 0.0;
        let mut n = 0usize;
        for ui in -h..=h {
            for uj in -h..=h {
                let ia = frag.idx(ui, uj);
                if frag.mask[ia] {
                    continue;
                }
                for &(di, dj) in &offsets {
                    let (vi, vj) = (ui + di, uj + dj);
                    if vi < -h || vi > h || vj < -h || vj > h {
                        continue;
                    }
                    let ib = frag.idx(vi, vj);
                    if frag.mask[ib] {
                        continue;
                    }
                    let d = frag.values[ia] - frag.values[ib];
                    sum += d * d;
                    // E[(n_p - n_q)^2] under the noise model.
                    let (sp, sq) = (
                        noise.variance_at(frag.values[ia]),
                        noise.variance_at(frag.values[ib]),
                    );
                    noise_sum += sp + sq - 2.0 * (sp * sq).sqrt() * noise.acf(r);
                    n += 1;
                }
            }
        }
        if n < 8 {
            return Err(RaeError::IllPosedTexture(format!(
                "too few pairs at lag^2 = {r2}"
            )));
        }
        let raw = sum / n as f64;
        raw_any = raw_any.max(raw);
        let corrected = (raw - noise_sum / n as f64).max(1e-4 * raw);
        if corrected <= 0.0 {
            return Err(RaeError::IllPosedTexture("constant fragment".into()));
        }
        xs.push(r.ln());
        ys.push(corrected.ln());
    }
    if raw_any <= 0.0 {
        return Err(RaeError::IllPosedTexture("constant fragment".into()));
    }
    // OLS on log-log axes: slope = 2H, intercept = ln sigma_x^2 (value at r = 1).
    let n = xs.len() as f64;
    let (sx, sy) = (xs.iter().sum::<f64>(), ys.iter().sum::<f64>());
    let sxx = xs.iter().map(|x| x * x).sum::<f64>();
    let sxy = xs.iter().zip(&ys).map(|(x, y)| x * y).sum::<f64>();
    let denom = n * sxx - sx * sx;
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    let sigma_x = (0.5 * intercept).exp().max(1e-9);
    Ok((0.5 * slope, sigma_x))
}

/// Estimate the texture parameter vector of an aligned fragment pair.
pub fn estimate_texture(
    frag_ref: &Fragment,
    frag_tmpl: &Fragment,
    noise_ref: &NoiseModel,
    noise_tmpl: &NoiseModel,
) -> Result<TextureParams> {
    if frag_ref.size != frag_tmpl.size {
        return Err(RaeError::IllPosedTexture("fragment size mismatch".into()));
    }
    let joint: Vec<usize> = (0..frag_ref.values.len())
        .filter(|&i| !frag_ref.mask[i] && !frag_tmpl.mask[i])
        .collect();
    if joint.len() < 100 {
        return Err(RaeError::IllPosedTexture(format!(
            "only {} jointly unmasked pixels",
            joint.len()
        )));
    }

    let (h_ref, sx_ref) = structure_regression(frag_ref, noise_ref)?;
    let (h_tmpl, sx_tmpl) = structure_regression(frag_tmpl, noise_tmpl)?;
    let hurst = (0.5 * (h_ref + h_tmpl)).clamp(0.05, 0.95);

    // Noise-debiased correlation over the joint set.
    let nf = joint.len() as f64;
    let (mut sr, mut st, mut srr, mut stt, mut srt) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut nvr, mut nvt) = (0.0, 0.0);
    for &i in &joint {
        let (r, t) = (frag_ref.values[i], frag_tmpl.values[i]);
        sr += r;
        st += t;
        srr += r * r;
        stt += t * t;
        srt += r * t;
        nvr += noise_ref.variance_at(r);
        nvt += noise_tmpl.variance_at(t);
    }
    let var_r = srr / nf - (sr / nf) * (sr / nf);
    let var_t = stt / nf - (st / nf) * (st / nf);
    if var_r <= 0.0 || var_t <= 0.0 {
        return Err(RaeError::IllPosedTexture("constant fragment".into()));
    }
    let cov = srt / nf - (sr / nf) * (st / nf);
    let den_r = (var_r - nvr / nf).max(1e-3 * var_r);
    let den_t = (var_t - nvt / nf).max(1e-3 * var_t);
    let k_rt = (cov / (den_r * den_t).sqrt()).clamp(-0.99, 0.99);

    Ok(TextureParams {
        sigma_x_ref: sx_ref,
        sigma_x_tmpl: sx_tmpl,
        k_rt,
        hurst,
    })
}

/// Fixed geometry and intensities entering the joint covariance: the jointly
/// unmasked pixels of the central box, as offsets from the fragment center.
#[derive(Debug, Clone)]
pub struct JointContext {
    pub pixels: Vec<(i64, i64)>,
    pub intens_ref: Vec<f64>,
    pub intens_tmpl: Vec<f64>,
    pub noise_ref: NoiseModel,
    pub noise_tmpl: NoiseModel,
}

impl JointContext {
    /// Central `box_side x box_side` jointly unmasked pixels of the pair.
    pub fn from_fragments(
        frag_ref: &Fragment,
        frag_tmpl: &Fragment,
        noise: &NoiseConfig,
        box_side: usize,
        min_pixels: usize,
    ) -> Result<Self> {
        let hb = (box_side.min(frag_ref.size) / 2) as i64;
        let mut pixels = Vec::new();
        let mut intens_ref = Vec::new();
        let mut intens_tmpl = Vec::new();
        for ui in -hb..=hb {
            for uj in -hb..=hb {
                let idx = frag_ref.idx(ui, uj);
                if frag_ref.mask[idx] || frag_tmpl.mask[idx] {
                    continue;
                }
                pixels.push((ui, uj));
                intens_ref.push(frag_ref.values[idx]);
                intens_tmpl.push(frag_tmpl.values[idx]);
            }
        }
        if pixels.len() < min_pixels.max(MIN_OVERLAP) {
            return Err(RaeError::DegenerateModel(format!(
                "only {} model pixels",
                pixels.len()
            )));
        }
        Ok(Self {
            pixels,
            intens_ref,
            intens_tmpl,
            noise_ref: noise.reference,
            noise_tmpl: noise.template,
        })
    }
}

/// Joint covariance of the stacked fragment pair `[ref; tmpl]` at `theta`.
/// Symmetric by construction; no jitter is applied here.
pub fn joint_covariance(theta: &ThetaPc, ctx: &JointContext) -> DMatrix<f64> {
    let n = ctx.pixels.len();
    let tx = &theta.texture;
    let two_h = 2.0 * tx.hurst;
    let d = theta.d_pc;

    // Power tables: within-block distances are integers on the lattice; the
    // cross block shifts template coordinates by d_pc.
    let hb = ctx
        .pixels
        .iter()
        .map(|&(a, b)| a.abs().max(b.abs()))
        .max()
        .unwrap_or(0);
    let max_r2 = (2 * hb) * (2 * hb) * 2 + 1;
    let int_pow: Vec<f64> = (0..=max_r2)
        .map(|r2| (r2 as f64).powf(tx.hurst))
        .collect();
    let side = (4 * hb + 1) as usize;
    let cross_pow: Vec<f64> = (0..side * side)
        .map(|idx| {
            let di = (idx / side) as i64 - 2 * hb;
            let dj = (idx % side) as i64 - 2 * hb;
            let ri = di as f64 - d.x;
            let rj = dj as f64 - d.y;
            (ri * ri + rj * rj).powf(tx.hurst)
        })
        .collect();
    let cross_at = |di: i64, dj: i64| cross_pow[((di + 2 * hb) as usize) * side + (dj + 2 * hb) as usize];
    // Anchored powers: |p|^2H within blocks, |p - d|^2H and |q + d|^2H plus
    // the constant |d|^2H for the cross block (per-fragment anchors).
    let p_pow: Vec<f64> = ctx
        .pixels
        .iter()
        .map(|&(a, b)| int_pow[(a * a + b * b) as usize])
        .collect();
    let pd_pow: Vec<f64> = ctx
        .pixels
        .iter()
        .map(|&(a, b)| {
            let ri = a as f64 - d.x;
            let rj = b as f64 - d.y;
            (ri * ri + rj * rj).powf(tx.hurst)
        })
        .collect();
    let qd_pow: Vec<f64> = ctx
        .pixels
        .iter()
        .map(|&(a, b)| {
            let ri = a as f64 + d.x;
            let rj = b as f64 + d.y;
            (ri * ri + rj * rj).powf(tx.hurst)
        })
        .collect();
    let d_pow = d.norm_squared().powf(tx.hurst);
    debug_assert!(two_h > 0.0);

    let s_rr = tx.sigma_x_ref * tx.sigma_x_ref;
    let s_tt = tx.sigma_x_tmpl * tx.sigma_x_tmpl;
    let s_rt = tx.k_rt * tx.sigma_x_ref * tx.sigma_x_tmpl;

    let mut c = DMatrix::zeros(2 * n, 2 * n);
    for a in 0..n {
        let (ai, aj) = ctx.pixels[a];
        let pa = Point::new(ai as f64, aj as f64);
        for b in a..n {
            let (bi, bj) = ctx.pixels[b];
            let dd = int_pow[((ai - bi) * (ai - bi) + (aj - bj) * (aj - bj)) as usize];
            let fbm = 0.5 * (p_pow[a] + p_pow[b] - dd);
            let pb = Point::new(bi as f64, bj as f64);
            let rr = s_rr * fbm + ctx.noise_ref.cov(pa, pb, ctx.intens_ref[a], ctx.intens_ref[b]);
            let tt = s_tt * fbm + ctx.noise_tmpl.cov(pa, pb, ctx.intens_tmpl[a], ctx.intens_tmpl[b]);
            c[(a, b)] = rr;
            c[(b, a)] = rr;
            c[(n + a, n + b)] = tt;
            c[(n + b, n + a)] = tt;
        }
        for b in 0..n {
            let (bi, bj) = ctx.pixels[b];
            // Increment covariance between ref pixel p_a (anchor 0) and the
            // displaced template pixel q_b + d (anchor d).
            let fbm = 0.5 * (pd_pow[a] + qd_pow[b] - cross_at(ai - bi, aj - bj) - d_pow);
            let rt = s_rt * fbm;
            c[(a, n + b)] = rt;
            c[(n + b, a)] = rt;
        }
    }
    c
}

/// Zero-mean Gaussian Fisher information by central differences and the
/// trace formula, for an arbitrary covariance builder. `steps[i]` is the
/// absolute perturbation of parameter `i`; `jitter` (times trace/dim) is
/// added to the diagonal before inversion.
pub fn fisher_information(
    build: &dyn Fn(&[f64]) -> DMatrix<f64>,
    theta: &[f64],
    steps: &[f64],
    jitter: f64,
) -> Result<DMatrix<f64>> {
    let np = theta.len();
    let c0 = build(theta);
    let dim = c0.nrows();
    let mut c0j = c0;
    let eps = jitter * c0j.trace() / dim as f64;
    for i in 0..dim {
        c0j[(i, i)] += eps;
    }
    let chol = c0j
        .clone()
        .cholesky()
        .ok_or_else(|| RaeError::DegenerateModel("covariance not positive definite".into()))?;
    let w = chol.inverse();

    let mut m = Vec::with_capacity(np);
    for i in 0..np {
        let mut tp = theta.to_vec();
        let mut tm = theta.to_vec();
        tp[i] += steps[i];
        tm[i] -= steps[i];
        let dc = (build(&tp) - build(&tm)) / (2.0 * steps[i]);
        m.push(&w * dc);
    }
    let mut fim = DMatrix::zeros(np, np);
    for i in 0..np {
        for j in i..np {
            let mut tr = 0.0;
            let (mi, mj) = (&m[i], &m[j]);
            for a in 0..dim {
                for b in 0..dim {
                    tr += mi[(a, b)] * mj[(b, a)];
                }
            }
            fim[(i, j)] = 0.5 * tr;
            fim[(j, i)] = 0.5 * tr;
        }
    }
    // PSD within tolerance.
    let norm = fim.norm();
    if norm.is_finite() {
        let min_eig = fim
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-8 * norm.max(1.0) {
            return Err(RaeError::DegenerateModel(format!(
                "information matrix indefinite (min eig {min_eig:.3e})"
            )));
        }
    } else {
        return Err(RaeError::DegenerateModel("non-finite information".into()));
    }
    Ok(fim)
}

/// 6x6 Fisher information of the fragment-pair model at `theta`.
pub fn fim(theta: &ThetaPc, ctx: &JointContext, cfg: &AccuracyConfig) -> Result<DMatrix<f64>> {
    let t = theta.as_array();
    let steps = [
        cfg.fd_step_rel * t[0].abs().max(1e-12),
        cfg.fd_step_rel * t[1].abs().max(1e-12),
        cfg.fd_step_abs,
        cfg.fd_step_abs,
        cfg.fd_step_abs,
        cfg.fd_step_abs,
    ];
    let ctx_ref = ctx;
    let build = move |v: &[f64]| joint_covariance(&ThetaPc::from_array(v), ctx_ref);
    fisher_information(&build, &t, &steps, cfg.jitter)
}

/// Invert the information matrix and read the translation block:
/// `sigma_lb = sqrt((C[4,4] + C[5,5]) / 2)`.
pub fn crlb_sigma(fim: &DMatrix<f64>) -> Result<f64> {
    let eig = fim.clone().symmetric_eigenvalues();
    let max_e = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_e = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min_e > 0.0) || max_e / min_e > 1e12 {
        return Err(RaeError::UnboundedCrlb(format!(
            "information matrix condition {:.3e}",
            max_e / min_e.max(f64::MIN_POSITIVE)
        )));
    }
    let inv = fim
        .clone()
        .try_inverse()
        .ok_or_else(|| RaeError::UnboundedCrlb("singular information matrix".into()))?;
    let n = fim.nrows();
    Ok(((inv[(n - 2, n - 2)] + inv[(n - 1, n - 1)]) / 2.0).sqrt())
}

/// Outcome of a full per-correspondence accuracy evaluation.
#[derive(Debug, Clone, Copy)]
pub struct PcAccuracy {
    pub texture: TextureParams,
    pub estimate: AccuracyEstimate,
}

/// Full evaluation used by the pipeline: texture estimation, FIM, bound,
/// threshold validation.
pub fn evaluate_pc(
    frag_ref: &Fragment,
    frag_tmpl: &Fragment,
    noise: &NoiseConfig,
    d_pc: Point,
    cfg: &AccuracyConfig,
) -> Result<PcAccuracy> {
    let texture = estimate_texture(frag_ref, frag_tmpl, &noise.reference, &noise.template)?;
    let ctx = JointContext::from_fragments(frag_ref, frag_tmpl, noise, cfg.crlb_box, cfg.min_pixels)?;
    let theta = ThetaPc { texture, d_pc };
    let info = fim(&theta, &ctx, cfg)?;
    let sigma_lb = crlb_sigma(&info)?;
    Ok(PcAccuracy {
        texture,
        estimate: validate(sigma_lb, cfg),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gen_fbm;
    use approx::assert_relative_eq;
    use nalgebra::Matrix2;

    fn frag_from_raster(r: &crate::raster::Raster) -> Fragment {
        Fragment {
            size: r.rows(),
            values: r.data().to_vec(),
            mask: vec![false; r.data().len()],
        }
    }

    fn tiny_noise() -> NoiseModel {
        NoiseModel::additive(0.01)
    }

    fn test_ctx(box_side: usize, d: f64) -> (ThetaPc, JointContext) {
        let hb = (box_side / 2) as i64;
        let mut pixels = Vec::new();
        for a in -hb..=hb {
            for b in -hb..=hb {
                pixels.push((a, b));
            }
        }
        let n = pixels.len();
        let ctx = JointContext {
            pixels,
            intens_ref: vec![50.0; n],
            intens_tmpl: vec![40.0; n],
            noise_ref: NoiseModel::additive(1.0),
            noise_tmpl: NoiseModel::additive(1.5),
        };
        let theta = ThetaPc {
            texture: TextureParams {
                sigma_x_ref: 8.0,
                sigma_x_tmpl: 6.0,
                k_rt: 0.9,
                hurst: 0.6,
            },
            d_pc: Point::new(d, -0.5 * d),
        };
        (theta, ctx)
    }

    #[test]
    fn texture_monte_carlo_band() {
        // Mean of the estimates over many 17x17 fragments cut from fields
        // with H = 0.5, sigma_x = 10.
        let mut sum_h = 0.0;
        let mut sum_sx = 0.0;
        let trials = 500;
        for t in 0..trials {
            let field = gen_fbm(64, 64, 0.5, 10.0, 9000 + t);
            let frag = Fragment {
                size: 17,
                values: (0..17 * 17)
                    .map(|m| field.get(20 + m / 17, 20 + m % 17))
                    .collect(),
                mask: vec![false; 17 * 17],
            };
            let tp = estimate_texture(
                &frag,
                &frag,
                &NoiseModel::additive(0.0),
                &NoiseModel::additive(0.0),
            )
            .unwrap();
            sum_h += tp.hurst;
            sum_sx += tp.sigma_x_ref;
        }
        let mean_h = sum_h / trials as f64;
        let mean_sx = sum_sx / trials as f64;
        assert!((0.4..=0.6).contains(&mean_h), "mean H {mean_h}");
        assert!((8.0..=12.0).contains(&mean_sx), "mean sigma_x {mean_sx}");
    }

    #[test]
    fn texture_identical_fragments_clamp_k() {
        let field = gen_fbm(17, 17, 0.5, 10.0, 4);
        let f = frag_from_raster(&field);
        let zero = NoiseModel::additive(0.0);
        let tp = estimate_texture(&f, &f, &zero, &zero).unwrap();
        assert_eq!(tp.k_rt, 0.99);
    }

    #[test]
    fn texture_independent_fragments_zero_mean_k() {
        let zero = NoiseModel::additive(0.0);
        let mut sum = 0.0;
        let trials = 500;
        for t in 0..trials {
            let a = gen_fbm(17, 17, 0.5, 10.0, 100_000 + t);
            let b = gen_fbm(17, 17, 0.5, 10.0, 200_000 + t);
            let tp =
                estimate_texture(&frag_from_raster(&a), &frag_from_raster(&b), &zero, &zero)
                    .unwrap();
            sum += tp.k_rt;
        }
        let mean = sum / trials as f64;
        assert!(mean.abs() < 0.05, "mean k {mean}");
    }

    #[test]
    fn texture_constant_fragment_errors() {
        let c = Fragment {
            size: 17,
            values: vec![5.0; 289],
            mask: vec![false; 289],
        };
        let zero = NoiseModel::additive(0.0);
        assert!(matches!(
            estimate_texture(&c, &c, &zero, &zero),
            Err(RaeError::IllPosedTexture(_))
        ));
    }

    #[test]
    fn covariance_zero_k_has_zero_cross_block() {
        let (mut theta, ctx) = test_ctx(7, 0.8);
        theta.texture.k_rt = 0.0;
        let c = joint_covariance(&theta, &ctx);
        let n = ctx.pixels.len();
        for a in 0..n {
            for b in 0..n {
                assert_eq!(c[(a, n + b)], 0.0);
            }
        }
    }

    #[test]
    fn covariance_unit_distance_increment_variance() {
        // Var(z(p) - z(q)) = sigma^2 |p-q|^2H; at H = 0.5 and unit distance
        // it equals sigma^2 exactly.
        let ctx = JointContext {
            pixels: vec![(0, 0), (0, 1)],
            intens_ref: vec![0.0; 2],
            intens_tmpl: vec![0.0; 2],
            noise_ref: NoiseModel::additive(0.0),
            noise_tmpl: NoiseModel::additive(0.0),
        };
        let theta = ThetaPc {
            texture: TextureParams {
                sigma_x_ref: 1.0,
                sigma_x_tmpl: 1.0,
                k_rt: 0.5,
                hurst: 0.5,
            },
            d_pc: Point::new(0.0, 0.0),
        };
        let c = joint_covariance(&theta, &ctx);
        let var = c[(0, 0)] + c[(1, 1)] - 2.0 * c[(0, 1)];
        assert_relative_eq!(var, 1.0, epsilon = 1e-12);
    }

    /// Entrywise oracle: direct formula evaluation without the power tables.
    #[test]
    fn covariance_matches_entrywise_oracle() {
        let (theta, ctx) = test_ctx(9, 1.3);
        let c = joint_covariance(&theta, &ctx);
        let n = ctx.pixels.len();
        let tx = &theta.texture;
        let two_h = 2.0 * tx.hurst;
        // Increment covariance of one fBm field between (B(x) - B(o)) and
        // (B(y) - B(o')): 0.5 (|x-o'| + |y-o| - |x-y| - |o-o'|)^2H terms.
        let inc = |x: Point, o: Point, y: Point, op: Point| -> f64 {
            0.5 * ((x - op).norm().powf(two_h) + (y - o).norm().powf(two_h)
                - (x - y).norm().powf(two_h)
                - (o - op).norm().powf(two_h))
        };
        let zero = Point::new(0.0, 0.0);
        for a in 0..n {
            let pa = Point::new(ctx.pixels[a].0 as f64, ctx.pixels[a].1 as f64);
            for b in 0..n {
                let pb = Point::new(ctx.pixels[b].0 as f64, ctx.pixels[b].1 as f64);
                let rr = tx.sigma_x_ref.powi(2) * inc(pa, zero, pb, zero)
                    + ctx.noise_ref.cov(pa, pb, ctx.intens_ref[a], ctx.intens_ref[b]);
                let tt = tx.sigma_x_tmpl.powi(2) * inc(pa, zero, pb, zero)
                    + ctx
                        .noise_tmpl
                        .cov(pa, pb, ctx.intens_tmpl[a], ctx.intens_tmpl[b]);
                let rt = tx.k_rt
                    * tx.sigma_x_ref
                    * tx.sigma_x_tmpl
                    * inc(pa, zero, pb + theta.d_pc, theta.d_pc);
                assert_relative_eq!(c[(a, b)], rr, epsilon = 1e-12, max_relative = 1e-12);
                assert_relative_eq!(c[(n + a, n + b)], tt, epsilon = 1e-12, max_relative = 1e-12);
                assert_relative_eq!(c[(a, n + b)], rt, epsilon = 1e-12, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn covariance_eigenvalues_bounded_below() {
        let (theta, ctx) = test_ctx(9, 0.6);
        let c = joint_covariance(&theta, &ctx);
        let min_eig = c
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert!(min_eig >= -1e-6 * c.trace(), "min eig {min_eig}");
    }

    /// Two-sample toy model with closed-form derivatives: the engine's
    /// finite-difference FIM must match the symbolic trace formula.
    #[test]
    fn fim_engine_matches_symbolic_toy() {
        // Observations (R(1), T(1+d)) in 1-D, anchored at 0:
        // C = [[sr^2, k sr st g], [k sr st g, st^2]],
        // g(H, d) = 0.5 (1 + |1+d|^2H - |d|^2H).
        let th = [2.0, 3.0, 0.6, 0.7, 0.4];
        let g = |h: f64, d: f64| 0.5 * (1.0 + (1.0 + d).abs().powf(2.0 * h) - d.abs().powf(2.0 * h));
        let build = move |v: &[f64]| {
            let (sr, st, k, h, d) = (v[0], v[1], v[2], v[3], v[4]);
            let off = k * sr * st * g(h, d);
            DMatrix::from_row_slice(2, 2, &[sr * sr, off, off, st * st])
        };
        let steps = [1e-5, 1e-5, 1e-5, 1e-5, 1e-5];
        let fim_fd = fisher_information(&build, &th, &steps, 0.0).unwrap();

        // Symbolic derivatives.
        let (sr, st, k, h, d) = (th[0], th[1], th[2], th[3], th[4]);
        let gv = g(h, d);
        let g_h = 0.5
            * ((1.0 + d).abs().powf(2.0 * h) * 2.0 * (1.0 + d).abs().ln()
                - d.abs().powf(2.0 * h) * 2.0 * d.abs().ln());
        let g_d = 0.5
            * (2.0 * h * (1.0 + d).abs().powf(2.0 * h - 1.0) * (1.0 + d).signum()
                - 2.0 * h * d.abs().powf(2.0 * h - 1.0) * d.signum());
        let c = Matrix2::new(sr * sr, k * sr * st * gv, k * sr * st * gv, st * st);
        let derivs = [
            Matrix2::new(2.0 * sr, k * st * gv, k * st * gv, 0.0),
            Matrix2::new(0.0, k * sr * gv, k * sr * gv, 2.0 * st),
            Matrix2::new(0.0, sr * st * gv, sr * st * gv, 0.0),
            Matrix2::new(0.0, k * sr * st * g_h, k * sr * st * g_h, 0.0),
            Matrix2::new(0.0, k * sr * st * g_d, k * sr * st * g_d, 0.0),
        ];
        let ci = c.try_inverse().unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let sym = 0.5 * (ci * derivs[i] * ci * derivs[j]).trace();
                assert_relative_eq!(fim_fd[(i, j)], sym, epsilon = 1e-6, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn fim_translation_block_invariant_under_joint_scaling() {
        let (theta, ctx) = test_ctx(7, 0.5);
        let cfg = AccuracyConfig::default();
        let f1 = fim(&theta, &ctx, &cfg).unwrap();

        let mut theta2 = theta;
        theta2.texture.sigma_x_ref *= 2.0;
        theta2.texture.sigma_x_tmpl *= 2.0;
        let ctx2 = JointContext {
            noise_ref: NoiseModel::additive(4.0 * ctx.noise_ref.sa2),
            noise_tmpl: NoiseModel::additive(4.0 * ctx.noise_tmpl.sa2),
            ..ctx.clone()
        };
        let f2 = fim(&theta2, &ctx2, &cfg).unwrap();
        for i in 4..6 {
            for j in 4..6 {
                assert_relative_eq!(
                    f1[(i, j)],
                    f2[(i, j)],
                    max_relative = 1e-6,
                    epsilon = 1e-9
                );
            }
        }
    }

    #[test]
    fn fim_symmetry_on_random_theta() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(64);
        let cfg = AccuracyConfig::default();
        for _ in 0..5 {
            let (mut theta, ctx) = test_ctx(7, rng.gen_range(-1.0..1.0));
            theta.texture.sigma_x_ref = rng.gen_range(2.0..10.0);
            theta.texture.sigma_x_tmpl = rng.gen_range(2.0..10.0);
            theta.texture.k_rt = rng.gen_range(-0.9..0.9);
            theta.texture.hurst = rng.gen_range(0.2..0.8);
            let f = fim(&theta, &ctx, &cfg).unwrap();
            let asym = (&f - f.transpose()).norm();
            assert!(asym <= 1e-8 * f.norm(), "asym {asym}");
        }
    }

    #[test]
    fn crlb_identity_and_diagonal() {
        let i6 = DMatrix::<f64>::identity(6, 6);
        assert_relative_eq!(crlb_sigma(&i6).unwrap(), 1.0, epsilon = 1e-12);

        let mut d = DMatrix::<f64>::identity(6, 6);
        d[(4, 4)] = 4.0;
        d[(5, 5)] = 16.0;
        assert_relative_eq!(
            crlb_sigma(&d).unwrap(),
            ((0.25 + 0.0625f64) / 2.0).sqrt(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn crlb_rejects_near_singular() {
        let mut m = DMatrix::<f64>::identity(6, 6);
        m[(4, 4)] = 1e-14;
        assert!(matches!(crlb_sigma(&m), Err(RaeError::UnboundedCrlb(_))));
    }

    #[test]
    fn uninformative_correlation_limits() {
        let cfg = AccuracyConfig::default();
        // Exactly zero correlation: the translation rows vanish and the
        // bound is unbounded.
        let (mut theta, ctx) = test_ctx(7, 0.3);
        theta.texture.k_rt = 0.0;
        let f = fim(&theta, &ctx, &cfg).unwrap();
        assert!(crlb_sigma(&f).is_err());

        // Nearly zero correlation: the bound diverges.
        theta.texture.k_rt = 1e-5;
        let f = fim(&theta, &ctx, &cfg).unwrap();
        match crlb_sigma(&f) {
            Ok(s) => assert!(s > 1e3, "sigma {s}"),
            Err(_) => {} // even harder failure of invertibility is acceptable
        }
    }

    #[test]
    fn sigma_lb_monotone_in_noise() {
        let cfg = AccuracyConfig::default();
        let mut prev = 0.0;
        for &lam in &[1.0, 2.0, 4.0] {
            let (theta, mut ctx) = test_ctx(9, 0.2);
            ctx.noise_ref = NoiseModel::additive(lam * 2.0);
            ctx.noise_tmpl = NoiseModel::additive(lam * 2.0);
            let s = crlb_sigma(&fim(&theta, &ctx, &cfg).unwrap()).unwrap();
            assert!(
                s >= prev - 1e-12,
                "sigma decreased under noise: {s} < {prev}"
            );
            prev = s;
        }
    }

    #[test]
    fn sigma_lb_monotone_in_correlation() {
        let cfg = AccuracyConfig::default();
        let mut prev = f64::INFINITY;
        for &k in &[0.3, 0.6, 0.9] {
            let (mut theta, ctx) = test_ctx(9, 0.2);
            theta.texture.k_rt = k;
            let s = crlb_sigma(&fim(&theta, &ctx, &cfg).unwrap()).unwrap();
            assert!(s <= prev + 1e-12, "sigma increased with |k|: {s} > {prev}");
            prev = s;
        }
    }

    #[test]
    fn validate_threshold_and_efficiency() {
        let cfg = AccuracyConfig::default();
        let a = validate(0.2, &cfg);
        assert!(a.validated);
        assert_relative_eq!(a.sigma_pc, 0.2 / 0.1f64.sqrt(), epsilon = 1e-12);

        let b = validate(0.35, &cfg);
        assert!(!b.validated);

        let mut cfg1 = cfg;
        cfg1.e_est = 1.0;
        let c = validate(0.2, &cfg1);
        assert_relative_eq!(c.sigma_pc, 0.2, epsilon = 1e-15);
    }
}
