//! Signal-dependent, spatially correlated noise model.
//!
//! Per-sample variance follows `sn^2 = sa^2 + sp^2 * I + smu^2 * I^2`
//! (additive, Poissonian and multiplicative components). Spatial correlation
//! is an isotropic Gaussian ACF of width `sc` pixels; `sc = 0` means white
//! noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::RaeError;
use crate::geometry::Point;
use crate::raster::Raster;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Additive variance, intensity^2.
    pub sa2: f64,
    /// Poissonian coefficient, intensity.
    pub sp2: f64,
    /// Multiplicative coefficient, unitless.
    pub smu2: f64,
    /// Correlation width, pixels (Gaussian ACF). 0 = white.
    pub sc: f64,
}

impl NoiseModel {
    pub fn additive(sa2: f64) -> Self {
        Self {
            sa2,
            sp2: 0.0,
            smu2: 0.0,
            sc: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.sa2, self.sp2, self.smu2, self.sc];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(RaeError::InvalidConfig(
                "noise parameters must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.sa2 == 0.0 && self.sp2 == 0.0 && self.smu2 == 0.0
    }

    /// Noise variance at intensity `i`. The Poissonian term clamps at zero
    /// for negative intensities.
    pub fn variance_at(&self, i: f64) -> f64 {
        self.sa2 + self.sp2 * i.max(0.0) + self.smu2 * i * i
    }

    pub fn sd_at(&self, i: f64) -> f64 {
        self.variance_at(i).sqrt()
    }

    /// Unit-peak Gaussian ACF at distance `r`; a delta for `sc = 0`.
    pub fn acf(&self, r: f64) -> f64 {
        if self.sc == 0.0 {
            if r == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            (-r * r / (2.0 * self.sc * self.sc)).exp()
        }
    }

    /// Noise covariance between samples at `p` and `q` with local intensities
    /// `i_p`, `i_q`.
    pub fn cov(&self, p: Point, q: Point, i_p: f64, i_q: f64) -> f64 {
        let rho = self.acf((p - q).norm());
        if rho == 0.0 {
            return 0.0;
        }
        self.sd_at(i_p) * self.sd_at(i_q) * rho
    }
}

/// Noise configuration for a registration pair.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub reference: NoiseModel,
    pub template: NoiseModel,
}

impl NoiseConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: NoiseConfig = serde_json::from_str(&text)?;
        cfg.reference.validate()?;
        cfg.template.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Sample a noise field with the model's covariance and add it to `clean`.
///
/// Correlation is realized by separable convolution of unit white noise with
/// a Gaussian kernel of width `sc / sqrt(2)`, normalized to unit output
/// variance, then scaled pointwise by `sn(I)`. Reproducible for a fixed seed.
pub fn sample_noise_field(model: &NoiseModel, clean: &Raster, seed: u64) -> Result<Raster> {
    model.validate()?;
    if model.is_zero() {
        return Ok(clean.clone());
    }
    let (rows, cols) = clean.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut white: Vec<f64> = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();

    if model.sc > 0.0 {
        let s = model.sc / std::f64::consts::SQRT_2;
        let radius = (6.0 * s).ceil() as i64;
        let taps: Vec<f64> = (-radius..=radius)
            .map(|u| (-((u * u) as f64) / (2.0 * s * s)).exp())
            .collect();
        // Unit variance after the separable pass: sum of squared 2-D weights
        // factorizes, so normalize each 1-D pass by sqrt(sum g^2).
        let norm = taps.iter().map(|g| g * g).sum::<f64>().sqrt();
        let taps: Vec<f64> = taps.iter().map(|g| g / norm).collect();
        white = convolve_rows(&white, rows, cols, &taps, radius);
        let t = transpose(&white, rows, cols);
        let t = convolve_rows(&t, cols, rows, &taps, radius);
        white = transpose(&t, cols, rows);
    }

    let mut out = clean.clone();
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        let sd = model.sd_at(clean.data()[idx]);
        *v += sd * white[idx];
    }
    Ok(out)
}

fn convolve_rows(data: &[f64], rows: usize, cols: usize, taps: &[f64], radius: i64) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        for c in 0..cols {
            let mut acc = 0.0;
            for (t, &g) in taps.iter().enumerate() {
                let src = c as i64 + t as i64 - radius;
                // Reflective boundary keeps variance flat near the edges.
                let src = reflect(src, cols as i64);
                acc += g * row[src as usize];
            }
            out[r * cols + c] = acc;
        }
    }
    out
}

fn reflect(i: i64, n: i64) -> i64 {
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - 1 - i;
        }
    }
    i
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}
