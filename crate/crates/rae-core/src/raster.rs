//! Raster ingestion, geo-metadata sidecars, bicubic interpolation, and tiling
//! of the template into control fragments.
//!
//! Two on-disk formats are supported: binary PGM (8/16-bit, big-endian
//! payload) and a raw "F32" format with an ASCII header line
//! `F32 <rows> <cols>\n` followed by row-major little-endian f32 samples.
//! Geo-metadata lives in a JSON sidecar next to the raster, with the raster
//! extension replaced by `.meta.json`.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::RaeError;
use crate::geometry::{Point, RstParams};
use crate::Result;

/// 2-D intensity grid with a nodata mask. `mask[idx] == true` marks a missing
/// sample; intensities are finite wherever the mask is false.
#[derive(Debug, Clone)]
pub struct Raster {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    mask: Vec<bool>,
}

impl Raster {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(RaeError::MalformedRaster(format!(
                "bad dimensions {rows}x{cols} for {} samples",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(RaeError::MalformedRaster("non-finite sample".into()));
        }
        let mask = vec![false; rows * cols];
        Ok(Self {
            rows,
            cols,
            data,
            mask,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data).expect("from_fn produced invalid raster")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        !self.mask[i * self.cols + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Mark every sample equal to `nodata` as missing.
    pub fn apply_nodata(&mut self, nodata: f64) {
        for (m, v) in self.mask.iter_mut().zip(&self.data) {
            if *v == nodata {
                *m = true;
            }
        }
    }

    pub fn set_masked(&mut self, i: usize, j: usize) {
        self.mask[i * self.cols + j] = true;
    }

    /// Bicubic interpolation (Catmull-Rom, a = -0.5) at a real-valued point.
    /// Integer grid points reproduce the stored sample exactly. Returns `None`
    /// outside the valid domain or when the 4x4 stencil touches a masked
    /// sample.
    pub fn interpolate_opt(&self, p: Point) -> Option<f64> {
        let (pi, pj) = (p.x, p.y);
        if !pi.is_finite() || !pj.is_finite() {
            return None;
        }
        // Exact lattice points bypass the stencil so border pixels stay
        // reachable and grid reproduction is bitwise.
        if pi.floor() == pi && pj.floor() == pj {
            let (i, j) = (pi as i64, pj as i64);
            if i >= 0 && j >= 0 && (i as usize) < self.rows && (j as usize) < self.cols {
                let (i, j) = (i as usize, j as usize);
                if self.is_valid(i, j) {
                    return Some(self.get(i, j));
                }
            }
            return None;
        }
        let i0 = pi.floor();
        let j0 = pj.floor();
        let (ti, tj) = (pi - i0, pj - j0);
        let (i0, j0) = (i0 as i64, j0 as i64);
        if i0 < 1 || j0 < 1 || i0 + 2 >= self.rows as i64 || j0 + 2 >= self.cols as i64 {
            return None;
        }
        let wi = catmull_rom_weights(ti);
        let wj = catmull_rom_weights(tj);
        let mut acc = 0.0;
        for di in 0..4usize {
            let row = (i0 as usize + di) - 1;
            let base = row * self.cols + (j0 as usize - 1);
            let mut racc = 0.0;
            for dj in 0..4usize {
                if self.mask[base + dj] {
                    return None;
                }
                racc += wj[dj] * self.data[base + dj];
            }
            acc += wi[di] * racc;
        }
        Some(acc)
    }

    /// Like [`interpolate_opt`](Self::interpolate_opt) but with a typed error
    /// for callers that treat out-of-domain points as failures.
    pub fn interpolate(&self, p: Point) -> Result<f64> {
        self.interpolate_opt(p)
            .ok_or(RaeError::OutsideDomain(p.x, p.y))
    }
}

/// Catmull-Rom (cubic convolution, a = -0.5) weights for fractional offset t.
#[inline]
fn catmull_rom_weights(t: f64) -> [f64; 4] {
    [
        ((-0.5 * t + 1.0) * t - 0.5) * t,
        (1.5 * t - 2.5) * t * t + 1.0,
        ((-1.5 * t + 2.0) * t + 0.5) * t,
        (0.5 * t - 0.5) * t * t,
    ]
}

/// Corner geolocation metadata: lon/lat of the four image corners in
/// UL/UR/LL/LR order plus the platform direct-geopositioning error SD.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoMeta {
    pub corner_lonlat: [(f64, f64); 4],
    /// Direct geopositioning error SD of the platform, in pixels.
    pub geopos_sd: f64,
}

impl GeoMeta {
    pub fn validate(&self) -> Result<()> {
        if self.geopos_sd < 0.0 || !self.geopos_sd.is_finite() {
            return Err(RaeError::InvalidMetadata("geopos_sd_px must be >= 0".into()));
        }
        let c = &self.corner_lonlat;
        if c.iter().any(|&(a, b)| !a.is_finite() || !b.is_finite()) {
            return Err(RaeError::InvalidMetadata("non-finite corner".into()));
        }
        for a in 0..4 {
            for b in (a + 1)..4 {
                if c[a] == c[b] {
                    return Err(RaeError::InvalidMetadata("duplicate corners".into()));
                }
            }
        }
        // Non-degenerate quadrilateral: UL/UR/LL spanning vectors independent.
        let e1 = (c[1].0 - c[0].0, c[1].1 - c[0].1);
        let e2 = (c[2].0 - c[0].0, c[2].1 - c[0].1);
        let cross = e1.0 * e2.1 - e1.1 * e2.0;
        let scale = (e1.0.hypot(e1.1)) * (e2.0.hypot(e2.1));
        if cross.abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            return Err(RaeError::InvalidMetadata("degenerate corner quad".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaJson {
    corners: [[f64; 2]; 4],
    geopos_sd_px: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    nodata: Option<f64>,
}

/// Sidecar path: raster extension replaced by `.meta.json`.
pub fn meta_path(raster_path: &Path) -> PathBuf {
    raster_path.with_extension("meta.json")
}

/// Supported raster container formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RasterFormat {
    Pgm,
    F32Raw,
}

/// Sniff the format from the leading magic bytes.
pub fn sniff_format(path: &Path) -> Result<RasterFormat> {
    let mut head = [0u8; 4];
    let mut f = std::fs::File::open(path)?;
    let n = f.read(&mut head)?;
    match &head[..n] {
        h if h.starts_with(b"P5") => Ok(RasterFormat::Pgm),
        h if h.starts_with(b"F32 ") => Ok(RasterFormat::F32Raw),
        _ => Err(RaeError::MalformedRaster(format!(
            "unrecognized magic in {}",
            path.display()
        ))),
    }
}

/// Load raster samples without requiring a metadata sidecar.
pub fn load_raster_data(path: &Path, format: RasterFormat) -> Result<Raster> {
    let bytes = std::fs::read(path)?;
    match format {
        RasterFormat::Pgm => parse_pgm(&bytes),
        RasterFormat::F32Raw => parse_f32(&bytes),
    }
}

/// Load a raster together with its geo-metadata sidecar. The nodata value
/// from the sidecar (if any) is applied to the mask.
pub fn load_raster(path: &Path, format: RasterFormat) -> Result<(Raster, GeoMeta)> {
    let mut raster = load_raster_data(path, format)?;
    let mpath = meta_path(path);
    let text = std::fs::read_to_string(&mpath)
        .map_err(|_| RaeError::MissingMetadata(mpath.display().to_string()))?;
    let mj: MetaJson = serde_json::from_str(&text)?;
    let meta = GeoMeta {
        corner_lonlat: [
            (mj.corners[0][0], mj.corners[0][1]),
            (mj.corners[1][0], mj.corners[1][1]),
            (mj.corners[2][0], mj.corners[2][1]),
            (mj.corners[3][0], mj.corners[3][1]),
        ],
        geopos_sd: mj.geopos_sd_px,
    };
    meta.validate()?;
    if let Some(nd) = mj.nodata {
        raster.apply_nodata(nd);
    }
    Ok((raster, meta))
}

fn parse_pgm(bytes: &[u8]) -> Result<Raster> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // Skip whitespace and '#' comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(RaeError::MalformedRaster("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token(bytes)? != "P5" {
        return Err(RaeError::MalformedRaster("not a binary PGM (P5)".into()));
    }
    let cols: usize = token(bytes)?
        .parse()
        .map_err(|_| RaeError::MalformedRaster("bad PGM width".into()))?;
    let rows: usize = token(bytes)?
        .parse()
        .map_err(|_| RaeError::MalformedRaster("bad PGM height".into()))?;
    let maxval: u32 = token(bytes)?
        .parse()
        .map_err(|_| RaeError::MalformedRaster("bad PGM maxval".into()))?;
    if maxval == 0 || maxval > 65535 {
        return Err(RaeError::MalformedRaster(format!("bad maxval {maxval}")));
    }
    // Exactly one whitespace byte separates header and payload.
    pos += 1;
    let payload = &bytes[pos.min(bytes.len())..];
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| RaeError::MalformedRaster("dimension overflow".into()))?;
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    if payload.len() < n * bytes_per {
        return Err(RaeError::MalformedRaster(format!(
            "payload short: {} bytes for {}x{} ({} expected)",
            payload.len(),
            rows,
            cols,
            n * bytes_per
        )));
    }
    let data: Vec<f64> = if bytes_per == 1 {
        payload[..n].iter().map(|&b| b as f64).collect()
    } else {
        payload[..2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
            .collect()
    };
    Raster::new(rows, cols, data)
}

fn parse_f32(bytes: &[u8]) -> Result<Raster> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| RaeError::MalformedRaster("missing F32 header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| RaeError::MalformedRaster("non-utf8 F32 header".into()))?;
    let mut it = header.split_whitespace();
    if it.next() != Some("F32") {
        return Err(RaeError::MalformedRaster("not an F32 raster".into()));
    }
    let rows: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| RaeError::MalformedRaster("bad F32 rows".into()))?;
    let cols: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| RaeError::MalformedRaster("bad F32 cols".into()))?;
    if it.next().is_some() {
        return Err(RaeError::MalformedRaster("trailing F32 header tokens".into()));
    }
    let payload = &bytes[nl + 1..];
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| RaeError::MalformedRaster("dimension overflow".into()))?;
    if payload.len() < 4 * n {
        return Err(RaeError::MalformedRaster(format!(
            "payload short: {} bytes for {}x{}",
            payload.len(),
            rows,
            cols
        )));
    }
    let data: Vec<f64> = payload[..4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Raster::new(rows, cols, data)
}

/// Write a raster in the raw F32 format.
pub fn write_f32(path: &Path, raster: &Raster) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "F32 {} {}\n", raster.rows(), raster.cols())?;
    let mut buf = Vec::with_capacity(4 * raster.data().len());
    for &v in raster.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

/// Write a 16-bit binary PGM; samples are rounded and clamped to [0, 65535].
pub fn write_pgm16(path: &Path, raster: &Raster) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n65535\n", raster.cols(), raster.rows())?;
    let mut buf = Vec::with_capacity(2 * raster.data().len());
    for &v in raster.data() {
        let q = v.round().clamp(0.0, 65535.0) as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

/// Write the metadata sidecar for a raster path.
pub fn write_meta(raster_path: &Path, meta: &GeoMeta, nodata: Option<f64>) -> Result<()> {
    let mj = MetaJson {
        corners: [
            [meta.corner_lonlat[0].0, meta.corner_lonlat[0].1],
            [meta.corner_lonlat[1].0, meta.corner_lonlat[1].1],
            [meta.corner_lonlat[2].0, meta.corner_lonlat[2].1],
            [meta.corner_lonlat[3].0, meta.corner_lonlat[3].1],
        ],
        geopos_sd_px: meta.geopos_sd,
        nodata,
    };
    std::fs::write(meta_path(raster_path), serde_json::to_string_pretty(&mj)?)?;
    Ok(())
}

/// One non-overlapping template tile used as a matching unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlFragment {
    pub index: usize,
    /// Tile center in template pixel coordinates.
    pub center: Point,
    /// Tile side length in pixels (odd).
    pub size: usize,
}

/// Fragment sizes for the template tiles and the projected reference-grid
/// window.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TilingConfig {
    pub n_ti: usize,
    pub n_ri: usize,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self { n_ti: 17, n_ri: 17 }
    }
}

impl TilingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, n) in [("n_ti", self.n_ti), ("n_ri", self.n_ri)] {
            if n < 9 || n % 2 == 0 {
                return Err(RaeError::InvalidConfig(format!(
                    "{name} must be odd and >= 9, got {n}",
                )));
            }
        }
        Ok(())
    }
}

/// Tile the template into non-overlapping control fragments; edge remainders
/// are dropped.
pub fn tile(template: &Raster, config: &TilingConfig) -> Result<Vec<ControlFragment>> {
    config.validate()?;
    let n = config.n_ti;
    let (tr, tc) = (template.rows() / n, template.cols() / n);
    if tr == 0 || tc == 0 {
        return Err(RaeError::ImageTooSmall);
    }
    let half = (n / 2) as f64;
    let mut out = Vec::with_capacity(tr * tc);
    for r in 0..tr {
        for c in 0..tc {
            out.push(ControlFragment {
                index: r * tc + c,
                center: Point::new(r as f64 * n as f64 + half, c as f64 * n as f64 + half),
                size: n,
            });
        }
    }
    Ok(out)
}

/// Square window of samples on the reference pixel lattice; zero-filled
/// entries are masked and excluded from all downstream statistics.
#[derive(Debug, Clone)]
pub struct Fragment {
    pub size: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Fragment {
    pub fn half(&self) -> i64 {
        (self.size / 2) as i64
    }

    #[inline]
    pub fn idx(&self, ui: i64, uj: i64) -> usize {
        let h = self.half();
        ((ui + h) as usize) * self.size + (uj + h) as usize
    }

    pub fn unmasked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| !m).count()
    }
}

/// Project a template control fragment onto the reference pixel lattice.
///
/// The window holds `n_ri x n_ri` samples at unit reference-pixel spacing
/// around `center`; sample `u` is the template interpolated at
/// `center + M^-1 u` with `M` the RST matrix. Samples that fall outside the
/// template (or whose stencil touches nodata) are zero-filled and masked.
pub fn extract_projected_fragment(
    template: &Raster,
    center: Point,
    rst: &RstParams,
    n_ri: usize,
) -> Result<Fragment> {
    if !(rst.scale > 0.0) || !rst.scale.is_finite() || !rst.angle.is_finite() {
        return Err(RaeError::InvalidConfig("invalid RST parameters".into()));
    }
    let m_inv = rst
        .matrix()
        .try_inverse()
        .ok_or_else(|| RaeError::InvalidConfig("singular RST matrix".into()))?;
    let h = (n_ri / 2) as i64;
    let mut values = Vec::with_capacity(n_ri * n_ri);
    let mut mask = Vec::with_capacity(n_ri * n_ri);
    let mut any_valid = false;
    let identity = rst.angle == 0.0 && rst.scale == 1.0;
    for ui in -h..=h {
        for uj in -h..=h {
            let u = Point::new(ui as f64, uj as f64);
            // Identity RST keeps the sample grid exactly on center + u so the
            // window is a bit-identical copy for integer centers.
            let x = if identity { center + u } else { center + m_inv * u };
            match template.interpolate_opt(x) {
                Some(v) => {
                    values.push(v);
                    mask.push(false);
                    any_valid = true;
                }
                None => {
                    values.push(0.0);
                    mask.push(true);
                }
            }
        }
    }
    if !any_valid {
        return Err(RaeError::FragmentOutside);
    }
    Ok(Fragment {
        size: n_ri,
        values,
        mask,
    })
}
