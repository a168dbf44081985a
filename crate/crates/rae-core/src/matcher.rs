//! Putative-correspondence search: NCC over the search zone on a half-pixel
//! lattice, local-extremum detection, and derivative-free subpixel
//! refinement.

use rayon::prelude::*;

use crate::error::RaeError;
use crate::geometry::Point;
use crate::raster::{Fragment, Raster};
use crate::Result;

/// Minimum jointly unmasked overlap for a valid correlation.
pub const MIN_OVERLAP: usize = 25;

/// NCC magnitude threshold for retaining a lattice extremum.
pub const K_RT_THRESHOLD: f64 = 0.25;

/// Circular search zone in reference coordinates.
#[derive(Debug, Clone, Copy)]
pub struct SearchZone {
    /// Predicted position of the fragment center, reference pixels.
    pub center: Point,
    /// Zone radius, reference pixels.
    pub radius: f64,
}

impl SearchZone {
    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.radius * self.radius
    }
}

/// Lifecycle of a putative correspondence. Transitions only move forward:
/// candidate -> {crlb_validated | rejected} -> {inlier | outlier}.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcState {
    Candidate,
    CrlbValidated,
    Rejected,
    Inlier,
    Outlier,
}

impl PcState {
    pub fn as_str(&self) -> &'static str {
        match self {
            PcState::Candidate => "candidate",
            PcState::CrlbValidated => "crlb_validated",
            PcState::Rejected => "rejected",
            PcState::Inlier => "inlier",
            PcState::Outlier => "outlier",
        }
    }
}

/// One putative correspondence between a control fragment and a reference
/// location.
#[derive(Debug, Clone)]
pub struct PutativeCorrespondence {
    pub cf_index: usize,
    /// Index within the CF's PC list, assigned in descending |k_rt| order.
    pub p_index: usize,
    /// Template point (CF center).
    pub x: Point,
    /// Matched reference point; subpixel after refinement.
    pub y: Point,
    pub k_rt: f64,
    pub state: PcState,
    pub sigma_lb: Option<f64>,
    pub sigma_pc: Option<f64>,
    pub posterior: Option<f64>,
    pub refinement_clipped: bool,
}

/// Pearson correlation between two equally sized fragments over their
/// jointly unmasked samples.
pub fn ncc(a: &Fragment, b: &Fragment) -> Result<f64> {
    if a.size != b.size {
        return Err(RaeError::UndefinedCorrelation(
            "fragment size mismatch".into(),
        ));
    }
    let mut n = 0usize;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for idx in 0..a.values.len() {
        if a.mask[idx] || b.mask[idx] {
            continue;
        }
        let (va, vb) = (a.values[idx], b.values[idx]);
        n += 1;
        sa += va;
        sb += vb;
        saa += va * va;
        sbb += vb * vb;
        sab += va * vb;
    }
    finish_ncc(n, sa, sb, saa, sbb, sab)
}

fn finish_ncc(n: usize, sa: f64, sb: f64, saa: f64, sbb: f64, sab: f64) -> Result<f64> {
    if n < MIN_OVERLAP {
        return Err(RaeError::UndefinedCorrelation(format!(
            "only {n} overlapping samples"
        )));
    }
    let nf = n as f64;
    let var_a = saa - sa * sa / nf;
    let var_b = sbb - sb * sb / nf;
    if var_a <= 0.0 || var_b <= 0.0 {
        return Err(RaeError::UndefinedCorrelation(
            "constant fragment".into(),
        ));
    }
    let cov = sab - sa * sb / nf;
    Ok((cov / (var_a * var_b).sqrt()).clamp(-1.0, 1.0))
}

/// NCC between a projected template fragment and the reference resampled at
/// window position `y` (fragment center), using bicubic interpolation.
pub fn ncc_at(warped: &Fragment, reference: &Raster, y: Point) -> Result<f64> {
    let h = warped.half();
    let mut n = 0usize;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ui in -h..=h {
        for uj in -h..=h {
            let idx = warped.idx(ui, uj);
            if warped.mask[idx] {
                continue;
            }
            let p = Point::new(y.x + ui as f64, y.y + uj as f64);
            let Some(vb) = reference.interpolate_opt(p) else {
                continue;
            };
            let va = warped.values[idx];
            n += 1;
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
        }
    }
    finish_ncc(n, sa, sb, saa, sbb, sab)
}

/// Search the zone for NCC extrema of the projected fragment on a 0.5-px
/// lattice. Returns correspondences with `|k_rt| > threshold`, sorted by
/// descending `|k_rt|`.
///
/// The whole zone is resampled once onto a half-pixel patch; each lattice
/// window then reads the patch with stride 2, so interpolation cost is paid
/// per zone rather than per window.
pub fn search_pcs(
    cf_index: usize,
    x_k: Point,
    warped: &Fragment,
    zone: &SearchZone,
    reference: &Raster,
    threshold: f64,
) -> Vec<PutativeCorrespondence> {
    if zone.radius < 1.0 {
        return Vec::new();
    }
    let h = warped.half();
    // Lattice offsets v = 0.5 * (a, b), |v| <= radius.
    let amax = (2.0 * zone.radius).floor() as i64;
    // Patch covers center + 0.5 * (a', b') with |a'| <= amax + 2h.
    let pmax = amax + 2 * h;
    let side = (2 * pmax + 1) as usize;

    let patch: Vec<Option<f64>> = (0..side * side)
        .into_par_iter()
        .map(|idx| {
            let a = (idx / side) as i64 - pmax;
            let b = (idx % side) as i64 - pmax;
            reference.interpolate_opt(Point::new(
                zone.center.x + 0.5 * a as f64,
                zone.center.y + 0.5 * b as f64,
            ))
        })
        .collect();
    let pget = |a: i64, b: i64| patch[((a + pmax) as usize) * side + (b + pmax) as usize];

    // Template sums over the unmasked set are shared by every window with the
    // same visibility pattern; recompute only the reference-side terms.
    let lat = (2 * amax + 1) as usize;
    let radius_sq = zone.radius * zone.radius;
    let grid: Vec<Option<f64>> = (0..lat * lat)
        .into_par_iter()
        .map(|idx| {
            let a = (idx / lat) as i64 - amax;
            let b = (idx % lat) as i64 - amax;
            let v = Point::new(0.5 * a as f64, 0.5 * b as f64);
            if v.norm_squared() > radius_sq {
                return None;
            }
            let mut n = 0usize;
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ui in -h..=h {
                for uj in -h..=h {
                    let widx = warped.idx(ui, uj);
                    if warped.mask[widx] {
                        continue;
                    }
                    let Some(vb) = pget(a + 2 * ui, b + 2 * uj) else {
                        continue;
                    };
                    let va = warped.values[widx];
                    n += 1;
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            }
            finish_ncc(n, sa, sb, saa, sbb, sab).ok()
        })
        .collect();
    let gget = |a: i64, b: i64| -> Option<f64> {
        if a.abs() > amax || b.abs() > amax {
            return None;
        }
        grid[((a + amax) as usize) * lat + (b + amax) as usize]
    };

    // Strict local maxima of |k| over the 8-neighborhood; exact plateau ties
    // go to the point closest to the zone center, then row-major.
    let rank = |a: i64, b: i64| (a * a + b * b, a, b);
    let mut found: Vec<(f64, i64, i64)> = Vec::new();
    for a in -amax..=amax {
        for b in -amax..=amax {
            let Some(k) = gget(a, b) else { continue };
            if k.abs() <= threshold {
                continue;
            }
            let mut is_max = true;
            'nb: for da in -1i64..=1 {
                for db in -1i64..=1 {
                    if da == 0 && db == 0 {
                        continue;
                    }
                    if let Some(kn) = gget(a + da, b + db) {
                        if kn.abs() > k.abs()
                            || (kn.abs() == k.abs() && rank(a + da, b + db) < rank(a, b))
                        {
                            is_max = false;
                            break 'nb;
                        }
                    }
                }
            }
            if is_max {
                found.push((k, a, b));
            }
        }
    }
    found.sort_by(|x, y| {
        y.0.abs()
            .total_cmp(&x.0.abs())
            .then_with(|| rank(x.1, x.2).cmp(&rank(y.1, y.2)))
    });
    found
        .into_iter()
        .enumerate()
        .map(|(p, (k, a, b))| PutativeCorrespondence {
            cf_index,
            p_index: p,
            x: x_k,
            y: Point::new(
                zone.center.x + 0.5 * a as f64,
                zone.center.y + 0.5 * b as f64,
            ),
            k_rt: k,
            state: PcState::Candidate,
            sigma_lb: None,
            sigma_pc: None,
            posterior: None,
            refinement_clipped: false,
        })
        .collect()
}

/// Subpixel refinement of a lattice correspondence: pattern search of |k_rt|
/// within a +-1 px box, step halving from 0.25 px down to 0.01 px.
///
/// Returns the refined `(y, k_rt, clipped)`. If the optimum runs into the box
/// boundary the lattice position is kept and `clipped` is set.
pub fn refine_subpixel(
    warped: &Fragment,
    reference: &Raster,
    y0: Point,
    k0: f64,
) -> Result<(Point, f64, bool)> {
    // The lattice value was computed on the shared patch; re-evaluate at the
    // starting point so all comparisons use one interpolation path.
    let mut best_y = y0;
    let mut best_k = ncc_at(warped, reference, y0)?;
    if best_k.abs() < k0.abs() - 1e-9 {
        best_k = if best_k.abs() >= k0.abs() { best_k } else { k0 };
        // Interpolation mismatch is possible only through masked borders;
        // keep the stronger lattice estimate in that case.
        best_y = y0;
    }
    let mut step = 0.25;
    while step >= 0.01 {
        let mut moved = false;
        for (di, dj) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)] {
            let cand = Point::new(best_y.x + di, best_y.y + dj);
            if (cand.x - y0.x).abs() > 1.0 + 1e-12 || (cand.y - y0.y).abs() > 1.0 + 1e-12 {
                continue;
            }
            if let Ok(k) = ncc_at(warped, reference, cand) {
                if k.abs() > best_k.abs() {
                    best_k = k;
                    best_y = cand;
                    moved = true;
                }
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    let clipped = (best_y.x - y0.x).abs() > 1.0 - 1e-9 || (best_y.y - y0.y).abs() > 1.0 - 1e-9;
    if clipped {
        return Ok((y0, k0, true));
    }
    Ok((best_y, best_k, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RstParams;
    use crate::raster::extract_projected_fragment;
    use crate::synth::gen_fbm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frag_from(values: Vec<f64>, size: usize) -> Fragment {
        Fragment {
            size,
            mask: vec![false; values.len()],
            values,
        }
    }

    #[test]
    fn ncc_self_negation_orthogonal() {
        let f = gen_fbm(9, 9, 0.5, 5.0, 1);
        let a = frag_from(f.data().to_vec(), 9);
        let neg = frag_from(f.data().iter().map(|v| -v).collect(), 9);
        assert!((ncc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ncc(&a, &neg).unwrap() + 1.0).abs() < 1e-12);

        // Separable zero-mean patterns: cov = (sum f)(sum g) = 0 exactly.
        let fr = |r: usize| [1.0, 0.0, -1.0][r % 3];
        let gc = |c: usize| [1.0, -2.0, 1.0][c % 3];
        let pa = frag_from(
            (0..81).map(|m| fr(m / 9)).collect::<Vec<f64>>(),
            9,
        );
        let pb = frag_from(
            (0..81).map(|m| gc(m % 9)).collect::<Vec<f64>>(),
            9,
        );
        assert!(ncc(&pa, &pb).unwrap().abs() < 1e-12);
    }

    #[test]
    fn ncc_symmetry_and_intensity_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let a = frag_from((0..81).map(|_| rng.gen_range(-5.0..5.0)).collect(), 9);
            let b = frag_from((0..81).map(|_| rng.gen_range(-5.0..5.0)).collect(), 9);
            let kab = ncc(&a, &b).unwrap();
            let kba = ncc(&b, &a).unwrap();
            assert!((kab - kba).abs() < 1e-12);

            let gain = rng.gen_range(0.1..10.0);
            let bias = rng.gen_range(-100.0..100.0);
            let b2 = frag_from(b.values.iter().map(|v| gain * v + bias).collect(), 9);
            assert!((ncc(&a, &b2).unwrap() - kab).abs() < 1e-12);
        }
    }

    #[test]
    fn ncc_rejects_constant_and_short_overlap() {
        let a = frag_from(vec![3.0; 81], 9);
        let b = frag_from((0..81).map(|m| m as f64).collect(), 9);
        assert!(matches!(ncc(&a, &b), Err(RaeError::UndefinedCorrelation(_))));

        let mut c = frag_from((0..81).map(|m| (m * m) as f64).collect(), 9);
        for m in 0..70 {
            c.mask[m] = true;
        }
        assert!(matches!(ncc(&c, &b), Err(RaeError::UndefinedCorrelation(_))));
    }

    /// Template cut from the reference at a known integer offset: the top PC
    /// must land within half a pixel of the truth with a strong correlation.
    #[test]
    fn search_finds_planted_offset() {
        let field = gen_fbm(120, 120, 0.5, 10.0, 7);
        // Template content equals reference shifted by (5, -3).
        let tmpl = Raster::from_fn(90, 90, |i, j| field.get(i + 15, j + 7));
        let reference = Raster::from_fn(120, 120, |i, j| field.get(i, j));
        let x_k = Point::new(45.0, 45.0);
        let warped = extract_projected_fragment(&tmpl, x_k, &RstParams::identity(), 17).unwrap();
        let zone = SearchZone {
            center: Point::new(45.0 + 10.0, 45.0 + 10.0),
            radius: 10.0,
        };
        let pcs = search_pcs(3, x_k, &warped, &zone, &reference, K_RT_THRESHOLD);
        assert!(!pcs.is_empty());
        let top = &pcs[0];
        let truth = Point::new(45.0 + 10.0 + 5.0, 45.0 + 10.0 - 3.0);
        assert!(top.k_rt > 0.9, "k = {}", top.k_rt);
        assert!((top.y - truth).norm() <= 0.5, "y = {:?}", top.y);
        for pc in &pcs {
            assert!(pc.k_rt.abs() > K_RT_THRESHOLD);
            assert!((pc.y - zone.center).norm() <= zone.radius + 0.5);
        }
    }

    #[test]
    fn search_noise_only_small_zone() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let reference = Raster::from_fn(60, 60, |_, _| rng.gen_range(-1.0..1.0));
        let tmpl = Raster::from_fn(60, 60, |_, _| rng.gen_range(-1.0..1.0));
        let x_k = Point::new(30.0, 30.0);
        let warped = extract_projected_fragment(&tmpl, x_k, &RstParams::identity(), 17).unwrap();
        let zone = SearchZone {
            center: x_k,
            radius: 1.0,
        };
        let pcs = search_pcs(0, x_k, &warped, &zone, &reference, K_RT_THRESHOLD);
        // Pure noise rarely clears the threshold in a radius-1 zone; whatever
        // comes back must honor the contract.
        for pc in &pcs {
            assert!(pc.k_rt.abs() > K_RT_THRESHOLD);
            assert!((pc.y - zone.center).norm() <= 1.5);
        }
    }

    #[test]
    fn search_retains_negative_extrema() {
        let field = gen_fbm(80, 80, 0.5, 10.0, 3);
        let reference = Raster::from_fn(80, 80, |i, j| field.get(i, j));
        let tmpl = Raster::from_fn(80, 80, |i, j| -field.get(i, j));
        let x_k = Point::new(40.0, 40.0);
        let warped = extract_projected_fragment(&tmpl, x_k, &RstParams::identity(), 17).unwrap();
        let zone = SearchZone {
            center: x_k,
            radius: 6.0,
        };
        let pcs = search_pcs(0, x_k, &warped, &zone, &reference, K_RT_THRESHOLD);
        assert!(!pcs.is_empty());
        assert!(pcs[0].k_rt < -0.9, "k = {}", pcs[0].k_rt);
        assert!((pcs[0].y - x_k).norm() < 0.01);
    }

    #[test]
    fn search_count_monotone_in_threshold() {
        let field = gen_fbm(140, 140, 0.4, 8.0, 17);
        let reference = Raster::from_fn(140, 140, |i, j| field.get(i, j));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tmpl = Raster::from_fn(140, 140, |i, j| {
            field.get(i, j) * 0.5 + rng.gen_range(-4.0..4.0)
        });
        let x_k = Point::new(70.0, 70.0);
        let warped = extract_projected_fragment(&tmpl, x_k, &RstParams::identity(), 17).unwrap();
        let zone = SearchZone {
            center: x_k,
            radius: 20.0,
        };
        let n25 = search_pcs(0, x_k, &warped, &zone, &reference, 0.25).len();
        let n50 = search_pcs(0, x_k, &warped, &zone, &reference, 0.50).len();
        let n75 = search_pcs(0, x_k, &warped, &zone, &reference, 0.75).len();
        assert!(n25 >= n50 && n50 >= n75, "{n25} {n50} {n75}");
    }

    fn shifted_pair(offset: (f64, f64), seed: u64) -> (Raster, Raster) {
        // Smooth texture; the template samples the reference field at +offset.
        let field = gen_fbm(160, 160, 0.8, 10.0, seed);
        let tmpl = Raster::from_fn(100, 100, |i, j| {
            field
                .interpolate_opt(Point::new(
                    i as f64 + offset.0 + 30.0,
                    j as f64 + offset.1 + 30.0,
                ))
                .unwrap()
        });
        let reference = Raster::from_fn(160, 160, |i, j| field.get(i, j));
        (reference, tmpl)
    }

    #[test]
    fn refine_reaches_fractional_offset() {
        let (reference, tmpl) = shifted_pair((5.25, 0.0), 11);
        let x_k = Point::new(50.0, 50.0);
        let warped = extract_projected_fragment(&tmpl, x_k, &RstParams::identity(), 17).unwrap();
        // Truth in reference coords: x_k + 30 + 5.25.
        let truth = Point::new(85.25, 80.0);
        let lattice = Point::new(85.5, 80.0);
        let k0 = ncc_at(&warped, &reference, lattice).unwrap();
        let (y, k, clipped) = refine_subpixel(&warped, &reference, lattice, k0).unwrap();
        assert!(!clipped);
        assert!(k.abs() >= k0.abs() - 1e-9);
        assert!((y - truth).norm() < 0.1, "refined {y:?} truth {truth:?}");
    }

    #[test]
    fn refine_stays_near_integer_offset() {
        let (reference, tmpl) = shifted_pair((4.0, -2.0), 13);
        let x_k = Point::new(50.0, 50.0);
        let warped = extract_projected_fragment(&tmpl, x_k, &RstParams::identity(), 17).unwrap();
        let lattice = Point::new(84.0, 78.0);
        let k0 = ncc_at(&warped, &reference, lattice).unwrap();
        let (y, _, _) = refine_subpixel(&warped, &reference, lattice, k0).unwrap();
        assert!((y - lattice).norm() < 0.2, "moved to {y:?}");
    }

    #[test]
    fn refine_propagates_degenerate_input() {
        let reference = Raster::from_fn(60, 60, |i, j| (i + j) as f64);
        let tmpl = Raster::from_fn(60, 60, |_, _| 1.0);
        let x_k = Point::new(30.0, 30.0);
        let warped = extract_projected_fragment(&tmpl, x_k, &RstParams::identity(), 17).unwrap();
        assert!(refine_subpixel(&warped, &reference, x_k, 0.5).is_err());
    }
}
