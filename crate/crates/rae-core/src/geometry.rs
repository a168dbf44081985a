//! Coordinate transforms: coarse affine initialization from corner metadata,
//! rotation/scale decomposition, the bivariate polynomial model and its local
//! linearization, and search-radius arithmetic.
//!
//! Pixel coordinates are `(i, j)` = (row, column), stored as
//! `nalgebra::Vector2<f64>` with `x = i` and `y = j`.

use nalgebra::{DVector, Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::RaeError;
use crate::raster::GeoMeta;
use crate::Result;

/// 2-D point in pixel coordinates, `(i, j)` = (row, col).
pub type Point = Vector2<f64>;

/// Affine map `y = A x + d` between pixel frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub a: Matrix2<f64>,
    pub d: Vector2<f64>,
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            a: Matrix2::identity(),
            d: Vector2::zeros(),
        }
    }

    pub fn apply(&self, x: Point) -> Point {
        self.a * x + self.d
    }
}

/// Rotation + isomorphic scaling approximation of an affine matrix.
///
/// The rotation convention is `R = [[cos a, sin a], [-sin a, cos a]]`, so the
/// matrix form is `scale * R`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RstParams {
    /// Isomorphic scale factor, > 0.
    pub scale: f64,
    /// Rotation angle in radians, normalized to (-pi, pi].
    pub angle: f64,
}

impl RstParams {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            angle: 0.0,
        }
    }

    pub fn matrix(&self) -> Matrix2<f64> {
        let (s, c) = self.angle.sin_cos();
        self.scale * Matrix2::new(c, s, -s, c)
    }
}

/// Number of coefficients of a bivariate polynomial of total degree `n`.
pub fn n_coeffs(degree: usize) -> usize {
    (degree + 2) * (degree + 1) / 2
}

/// Exponent pairs `(k_i, k_j)` of the monomial basis in canonical order:
/// ascending total degree, and within a degree the `i`-exponent descends.
/// Degree 2 reads `1, i, j, i^2, ij, j^2`.
pub fn monomial_exponents(degree: usize) -> Vec<(u32, u32)> {
    let mut out = Vec::with_capacity(n_coeffs(degree));
    for total in 0..=degree as u32 {
        for kj in 0..=total {
            out.push((total - kj, kj));
        }
    }
    out
}

/// Evaluate the monomial vector `e(x)` at a template point.
pub fn monomials(degree: usize, x: Point) -> DVector<f64> {
    let mut pow_i = vec![1.0; degree + 1];
    let mut pow_j = vec![1.0; degree + 1];
    for k in 1..=degree {
        pow_i[k] = pow_i[k - 1] * x.x;
        pow_j[k] = pow_j[k - 1] * x.y;
    }
    let exps = monomial_exponents(degree);
    DVector::from_iterator(
        exps.len(),
        exps.iter()
            .map(|&(ki, kj)| pow_i[ki as usize] * pow_j[kj as usize]),
    )
}

/// Bivariate polynomial map from template to reference coordinates.
///
/// `y = (c1 . e(x), c2 . e(x))` where `e` is the monomial vector in the
/// canonical order of [`monomial_exponents`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialTransform {
    pub degree: usize,
    pub c1: DVector<f64>,
    pub c2: DVector<f64>,
}

impl PolynomialTransform {
    pub fn new(degree: usize, c1: DVector<f64>, c2: DVector<f64>) -> Result<Self> {
        let nc = n_coeffs(degree);
        if degree < 1 || c1.len() != nc || c2.len() != nc {
            return Err(RaeError::InvalidConfig(format!(
                "coefficient length {} does not match degree {} (expected {})",
                c1.len(),
                degree,
                nc
            )));
        }
        if c1.iter().chain(c2.iter()).any(|v| !v.is_finite()) {
            return Err(RaeError::InvalidConfig("non-finite coefficient".into()));
        }
        Ok(Self { degree, c1, c2 })
    }

    /// Degree-`n` transform whose linear part equals `affine` and whose
    /// higher-order coefficients are zero.
    pub fn from_affine(affine: &AffineTransform, degree: usize) -> Self {
        let nc = n_coeffs(degree);
        let mut c1 = DVector::zeros(nc);
        let mut c2 = DVector::zeros(nc);
        c1[0] = affine.d.x;
        c1[1] = affine.a[(0, 0)];
        c1[2] = affine.a[(0, 1)];
        c2[0] = affine.d.y;
        c2[1] = affine.a[(1, 0)];
        c2[2] = affine.a[(1, 1)];
        Self { degree, c1, c2 }
    }

    pub fn identity(degree: usize) -> Self {
        Self::from_affine(&AffineTransform::identity(), degree)
    }

    pub fn eval(&self, x: Point) -> Point {
        let e = monomials(self.degree, x);
        Vector2::new(self.c1.dot(&e), self.c2.dot(&e))
    }

    /// Analytic Jacobian of the map at `x0`.
    pub fn jacobian(&self, x0: Point) -> Matrix2<f64> {
        let exps = monomial_exponents(self.degree);
        let mut j = Matrix2::zeros();
        for (m, &(ki, kj)) in exps.iter().enumerate() {
            let (ki, kj) = (ki as i32, kj as i32);
            // d/di: ki * i^(ki-1) * j^kj
            if ki > 0 {
                let v = ki as f64 * powi(x0.x, ki - 1) * powi(x0.y, kj);
                j[(0, 0)] += self.c1[m] * v;
                j[(1, 0)] += self.c2[m] * v;
            }
            if kj > 0 {
                let v = kj as f64 * powi(x0.x, ki) * powi(x0.y, kj - 1);
                j[(0, 1)] += self.c1[m] * v;
                j[(1, 1)] += self.c2[m] * v;
            }
        }
        j
    }
}

fn powi(base: f64, exp: i32) -> f64 {
    debug_assert!(exp >= 0);
    base.powi(exp)
}

/// First-order (Taylor) affine approximation of the transform around `x0`.
pub fn local_affine(t: &PolynomialTransform, x0: Point) -> AffineTransform {
    let a = t.jacobian(x0);
    let d = t.eval(x0) - a * x0;
    AffineTransform { a, d }
}

/// Least-squares affine mapping template pixels to reference pixels through
/// the shared lon/lat frame (treated as locally planar).
pub fn affine_from_corners(
    ref_meta: &GeoMeta,
    tmpl_meta: &GeoMeta,
    ref_dims: (usize, usize),
    tmpl_dims: (usize, usize),
) -> Result<AffineTransform> {
    let lonlat_to_ref = fit_affine(&ref_meta.corner_lonlat, &corner_pixels(ref_dims))?;
    // Template corner pixels paired with their positions in the reference
    // pixel frame, then a second least-squares affine over those 4 pairs.
    let tmpl_px = corner_pixels(tmpl_dims);
    let targets: Vec<Point> = tmpl_meta
        .corner_lonlat
        .iter()
        .map(|&ll| lonlat_to_ref.apply(Vector2::new(ll.0, ll.1)))
        .collect();
    let affine = fit_affine_pts(&tmpl_px, &targets)?;
    let det = affine.a.determinant();
    if det <= 0.0 {
        return Err(RaeError::NonPositiveDeterminant(det));
    }
    Ok(affine)
}

/// Corner pixel coordinates (i, j) in UL/UR/LL/LR order.
fn corner_pixels((rows, cols): (usize, usize)) -> [Point; 4] {
    let (m, n) = (rows as f64 - 1.0, cols as f64 - 1.0);
    [
        Vector2::new(0.0, 0.0),
        Vector2::new(0.0, n),
        Vector2::new(m, 0.0),
        Vector2::new(m, n),
    ]
}

fn fit_affine(src: &[(f64, f64); 4], dst: &[Point; 4]) -> Result<AffineTransform> {
    let src_pts: Vec<Point> = src.iter().map(|&(a, b)| Vector2::new(a, b)).collect();
    fit_affine_pts(&src_pts, dst)
}

/// Normal-equations least-squares affine over point pairs. Source points are
/// centered and scaled first; an affine reparameterization of the regressors
/// leaves the least-squares solution unchanged while keeping the 3x3 system
/// well conditioned even for degree-sized lon/lat offsets.
fn fit_affine_pts(src: &[Point], dst: &[Point]) -> Result<AffineTransform> {
    let n = src.len() as f64;
    let s_mean: Point = src.iter().sum::<Point>() / n;
    let d_mean: Point = dst.iter().sum::<Point>() / n;
    let spread = src.iter().map(|s| (s - s_mean).norm()).sum::<f64>() / n;
    if !(spread > 0.0) {
        return Err(RaeError::DegenerateCorners);
    }
    let mut g = Matrix3::zeros();
    let mut rhs_i = Vector3::zeros();
    let mut rhs_j = Vector3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let sn = (s - s_mean) / spread;
        let v = Vector3::new(1.0, sn.x, sn.y);
        g += v * v.transpose();
        rhs_i += (d.x - d_mean.x) * v;
        rhs_j += (d.y - d_mean.y) * v;
    }
    let inv = g.try_inverse().ok_or(RaeError::DegenerateCorners)?;
    // Guard against a numerically meaningless inverse (collinear corners).
    if (g * inv - Matrix3::identity()).abs().max() > 1e-6 {
        return Err(RaeError::DegenerateCorners);
    }
    let pi = inv * rhs_i;
    let pj = inv * rhs_j;
    let a = Matrix2::new(pi[1], pi[2], pj[1], pj[2]) / spread;
    let d = d_mean + Vector2::new(pi[0], pj[0]) - a * s_mean;
    Ok(AffineTransform { a, d })
}

/// Decompose an affine matrix into its closest rotation + isomorphic scale:
/// scale = sqrt(det A), rotation from `R = U V^T` of the SVD `A = U S V^T`.
pub fn rst_from_affine(a: &Matrix2<f64>) -> Result<RstParams> {
    let det = a.determinant();
    if det <= 0.0 {
        return Err(RaeError::NonPositiveDeterminant(det));
    }
    let svd = a.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let r = u * v_t;
    // R = [[cos a, sin a], [-sin a, cos a]]
    let angle = r[(0, 1)].atan2(r[(0, 0)]);
    Ok(RstParams {
        scale: det.sqrt(),
        angle,
    })
}

/// Local-linearity errors of `a_linear` against its RST approximation:
/// `d1` is the largest singular value of `A_linear - A_RST`, i.e. the
/// maximum uncompensated displacement at unit distance; `d10 = 10 d1`.
pub fn linearity_errors(a_linear: &Matrix2<f64>, rst: &RstParams) -> (f64, f64) {
    let m = a_linear - rst.matrix();
    let mmt = m * m.transpose();
    // Largest eigenvalue of the symmetric 2x2 [[a, b], [b, c]].
    let (a, b, c) = (mmt[(0, 0)], mmt[(0, 1)], mmt[(1, 1)]);
    let lam_max = 0.5 * (a + c + ((a - c).powi(2) + 4.0 * b * b).sqrt());
    let d1 = lam_max.max(0.0).sqrt();
    (d1, 10.0 * d1)
}

/// Initial search-zone radius from the direct geopositioning error SDs of the
/// two platforms: `3 * sqrt(sd_ref^2 + sd_tmpl^2 * scale^2)`, in reference
/// pixels.
pub fn initial_search_radius(sigma_g_ref: f64, sigma_g_tmpl: f64, scale_init: f64) -> f64 {
    3.0 * (sigma_g_ref * sigma_g_ref + sigma_g_tmpl * sigma_g_tmpl * scale_init * scale_init)
        .sqrt()
}

/// Search-zone configuration; `d_max0` may be derived from platform SDs or
/// overridden explicitly.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SearchConfig {
    pub d_max0: f64,
    pub sigma_g_ref: f64,
    pub sigma_g_tmpl: f64,
}

impl SearchConfig {
    pub fn derived(sigma_g_ref: f64, sigma_g_tmpl: f64, scale_init: f64) -> Self {
        Self {
            d_max0: initial_search_radius(sigma_g_ref, sigma_g_tmpl, scale_init),
            sigma_g_ref,
            sigma_g_tmpl,
        }
    }
}

/// JSON-serializable form of a fitted transform. `cov` is the optional
/// row-major coefficient covariance (shared by both coordinate vectors).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformJson {
    pub degree: usize,
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cov: Option<Vec<Vec<f64>>>,
}

impl TransformJson {
    pub fn from_transform(t: &PolynomialTransform, cov: Option<&nalgebra::DMatrix<f64>>) -> Self {
        Self {
            degree: t.degree,
            c1: t.c1.iter().copied().collect(),
            c2: t.c2.iter().copied().collect(),
            cov: cov.map(|m| {
                (0..m.nrows())
                    .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
                    .collect()
            }),
        }
    }

    pub fn to_transform(&self) -> Result<PolynomialTransform> {
        PolynomialTransform::new(
            self.degree,
            DVector::from_vec(self.c1.clone()),
            DVector::from_vec(self.c2.clone()),
        )
    }

    pub fn cov_matrix(&self) -> Option<nalgebra::DMatrix<f64>> {
        let cov = self.cov.as_ref()?;
        let n = cov.len();
        if cov.iter().any(|row| row.len() != n) {
            return None;
        }
        Some(nalgebra::DMatrix::from_fn(n, n, |r, c| cov[r][c]))
    }
}
