//! Joint outlier detection and global transform estimation.
//!
//! Each validated correspondence is either an inlier, normally distributed
//! around the transform prediction with covariance `sigma_pc^2 I`, or an
//! outlier, uniform over its search zone. The mixture is solved by EM. The
//! inlier density for a fragment's correspondences uses a leave-one-out
//! prediction fitted from the *other* fragments (nearest `n_c + 1` inlying
//! neighbors), which removes high-leverage points: an isolated fragment
//! cannot validate its own outlier by bending the fit towards itself.
//!
//! All least-squares systems run internally on a power-of-two scaled
//! monomial basis (exact diagonal reparameterization) to keep the normal
//! equations well conditioned at image-sized coordinates; coefficients and
//! covariances are mapped back to the raw basis at the boundary.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::RaeError;
use crate::geometry::{
    monomial_exponents, monomials, n_coeffs, AffineTransform, Point, PolynomialTransform,
};
use crate::kdtree::KdTree;
use crate::Result;

/// One CRLB-validated correspondence as the solver sees it.
#[derive(Debug, Clone, Copy)]
pub struct VpcObs {
    /// Control-fragment id the observation belongs to.
    pub cf_index: usize,
    /// Stable id of the PC in the caller's store (reporting only).
    pub pc_id: usize,
    /// Template point (CF center).
    pub x: Point,
    /// Matched reference point.
    pub y: Point,
    /// Effective registration-error SD of the correspondence, pixels.
    pub sigma_pc: f64,
    /// Area of the CF's current search zone, reference px^2.
    pub zone_area: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Posterior threshold for the inlier rule (strict `>`).
    pub p_th: f64,
    /// Number of valid multistart seeds to run EM from.
    pub n_starts: usize,
    pub max_em_iters: usize,
    /// Relative |dQ| convergence tolerance.
    pub em_tol: f64,
    /// Initial a-priori per-CF inlier probability.
    pub init_p_cf: f64,
    /// Leave-one-out predictions (the production likelihood). `false`
    /// switches to a single pooled fit shared by all fragments, kept for
    /// leverage-sensitivity experiments.
    pub loocv: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            p_th: 0.9,
            n_starts: 10,
            max_em_iters: 100,
            em_tol: 1e-6,
            init_p_cf: 0.5,
            loocv: true,
        }
    }
}

/// Work counters for the complexity contract.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct SolverStats {
    /// Monomial-basis evaluations performed inside M-step accumulations.
    pub basis_evals: u64,
    pub em_iterations: u64,
}

/// Mixture state at an EM fixpoint.
#[derive(Debug, Clone)]
pub struct MixtureState {
    /// Shared a-priori per-CF inlier probability.
    pub p_cf: f64,
    /// Posterior inlier probability per observation.
    pub posteriors: Vec<f64>,
    /// Per-CF leave-one-out transforms (indexed like `groups`); None when the
    /// fragment's neighborhood was degenerate at the last M-step.
    pub loocv_transforms: Vec<Option<PolynomialTransform>>,
    /// Complete-data expected log-likelihood at the fixpoint.
    pub q: f64,
    /// Q value after every iteration (nondecreasing up to the stop rule).
    pub q_trace: Vec<f64>,
    pub converged: bool,
}

/// Final fit output: transform, coefficient covariance (raw monomial basis,
/// shared by both coordinates), and the fitted inlier observations.
#[derive(Debug, Clone)]
pub struct GlobalEstimate {
    pub transform: PolynomialTransform,
    pub r_c: DMatrix<f64>,
    /// Indices into the observation slice that entered the fit.
    pub inlier_obs: Vec<usize>,
}

/// A-priori per-PC inlier probability from the CF-level probability:
/// `1 - (1 - p_cf)^(1/n)`.
pub fn prior_pc_prob(p_cf: f64, n_vpc: usize) -> f64 {
    debug_assert!(n_vpc >= 1);
    1.0 - (1.0 - p_cf).powf(1.0 / n_vpc as f64)
}

/// Observations grouped by control fragment, in ascending cf_index order.
#[derive(Debug, Clone)]
pub struct CfGroup {
    pub cf_index: usize,
    pub x: Point,
    /// Indices into the observation slice.
    pub obs: Vec<usize>,
}

pub fn group_by_cf(obs: &[VpcObs]) -> Vec<CfGroup> {
    let mut map: std::collections::BTreeMap<usize, CfGroup> = std::collections::BTreeMap::new();
    for (i, o) in obs.iter().enumerate() {
        map.entry(o.cf_index)
            .or_insert_with(|| CfGroup {
                cf_index: o.cf_index,
                x: o.x,
                obs: Vec::new(),
            })
            .obs
            .push(i);
    }
    map.into_values().collect()
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(1e-12, 1.0 - 1e-12)
}

/// E-step: posterior inlier probabilities given per-CF predictions and the
/// current CF-level prior. Observations of a CF without a prediction keep
/// their previous posterior.
pub fn e_step(
    obs: &[VpcObs],
    groups: &[CfGroup],
    transforms: &[Option<PolynomialTransform>],
    p_cf: f64,
    previous: &[f64],
) -> Vec<f64> {
    let mut post = previous.to_vec();
    // A zero CF-level prior annihilates every posterior exactly.
    if p_cf <= 0.0 {
        for (g, group) in groups.iter().enumerate() {
            if transforms[g].is_some() {
                for &i in &group.obs {
                    post[i] = 0.0;
                }
            }
        }
        return post;
    }
    let p_cf = clamp_p(p_cf);
    for (g, group) in groups.iter().enumerate() {
        let Some(t) = &transforms[g] else { continue };
        let p_pc = prior_pc_prob(p_cf, group.obs.len());
        let pred = t.eval(group.x);
        for &i in &group.obs {
            let o = &obs[i];
            let r2 = (o.y - pred).norm_squared();
            let s2 = o.sigma_pc * o.sigma_pc;
            // log N(r; s^2 I) = -r^2/(2 s^2) - ln(2 pi s^2)
            let log_num = p_pc.max(1e-300).ln() - r2 / (2.0 * s2)
                - (2.0 * std::f64::consts::PI * s2).ln();
            let log_out = ((1.0 - p_cf) / o.zone_area).max(1e-300).ln();
            post[i] = if p_pc <= 0.0 {
                0.0
            } else {
                1.0 / (1.0 + (log_out - log_num).exp())
            };
        }
    }
    post
}

/// M-step update of the shared CF-level prior: mean over fragments of the
/// per-fragment at-least-one-inlier posterior.
pub fn m_step_pcf(groups: &[CfGroup], posteriors: &[f64]) -> Result<f64> {
    if groups.is_empty() {
        return Err(RaeError::MStepFailure("no validated fragments".into()));
    }
    let mut sum = 0.0;
    for g in groups {
        let mut none = 1.0;
        for &i in &g.obs {
            none *= 1.0 - posteriors[i];
        }
        sum += 1.0 - none;
    }
    Ok(sum / groups.len() as f64)
}

/// Power-of-two coordinate scale used for the internal monomial basis; the
/// diagonal rescaling is exact in floating point.
fn pow2_scale(groups: &[CfGroup]) -> f64 {
    let m = groups
        .iter()
        .map(|g| g.x.x.abs().max(g.x.y.abs()))
        .fold(1.0f64, f64::max);
    let mut s = 1.0;
    while s < m {
        s *= 2.0;
    }
    s
}

/// Diagonal scale factors from the scaled to the raw basis:
/// `c_raw[m] = c_scaled[m] * s^-(ki+kj)`.
fn basis_diag(degree: usize, scale: f64) -> DVector<f64> {
    let exps = monomial_exponents(degree);
    DVector::from_iterator(
        exps.len(),
        exps.iter()
            .map(|&(ki, kj)| scale.powi(-((ki + kj) as i32))),
    )
}

struct Wls {
    info: DMatrix<f64>,
    b1: DVector<f64>,
    b2: DVector<f64>,
}

impl Wls {
    fn new(nc: usize) -> Self {
        Self {
            info: DMatrix::zeros(nc, nc),
            b1: DVector::zeros(nc),
            b2: DVector::zeros(nc),
        }
    }

    fn add(&mut self, e: &DVector<f64>, y: Point, w_inv: f64) {
        self.info.syger(w_inv, e, e, 1.0);
        self.b1.axpy(w_inv * y.x, e, 1.0);
        self.b2.axpy(w_inv * y.y, e, 1.0);
    }

    /// Solve both coordinate systems; errors on condition > 1e12.
    fn solve(&self) -> Result<(DVector<f64>, DVector<f64>, DMatrix<f64>)> {
        // syger filled only the lower triangle.
        let mut info = self.info.clone();
        for r in 0..info.nrows() {
            for c in (r + 1)..info.ncols() {
                info[(r, c)] = info[(c, r)];
            }
        }
        let eig = info.clone().symmetric_eigenvalues();
        let max_e = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min_e = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(min_e > 0.0) || max_e / min_e > 1e12 {
            return Err(RaeError::DegenerateNeighborhood(
                max_e / min_e.abs().max(f64::MIN_POSITIVE),
            ));
        }
        let chol = info
            .clone()
            .cholesky()
            .ok_or(RaeError::DegenerateNeighborhood(max_e / min_e))?;
        let c1 = chol.solve(&self.b1);
        let c2 = chol.solve(&self.b2);
        Ok((c1, c2, chol.inverse()))
    }
}

/// Weighted polynomial fit over the given observation indices, in the scaled
/// basis; returns raw-basis transform and (optionally) raw-basis covariance.
fn weighted_fit(
    obs: &[VpcObs],
    idxs: impl IntoIterator<Item = usize>,
    posteriors: &[f64],
    degree: usize,
    scale: f64,
    stats: &mut SolverStats,
) -> Result<(PolynomialTransform, DMatrix<f64>)> {
    let nc = n_coeffs(degree);
    let mut wls = Wls::new(nc);
    let mut n = 0usize;
    for i in idxs {
        let o = &obs[i];
        let e = monomials(degree, o.x / scale);
        stats.basis_evals += 1;
        // w = sigma^2 / posterior; accumulate w^-1.
        let w_inv = posteriors[i].max(1e-12) / (o.sigma_pc * o.sigma_pc);
        wls.add(&e, o.y, w_inv);
        n += 1;
    }
    if n < nc {
        return Err(RaeError::MStepFailure(format!(
            "{n} observations for {nc} coefficients"
        )));
    }
    let (c1s, c2s, cov_s) = wls.solve()?;
    let d = basis_diag(degree, scale);
    let c1 = c1s.component_mul(&d);
    let c2 = c2s.component_mul(&d);
    let mut r_c = cov_s;
    for r in 0..nc {
        for c in 0..nc {
            r_c[(r, c)] *= d[r] * d[c];
        }
    }
    Ok((PolynomialTransform::new(degree, c1, c2)?, r_c))
}

/// CFs whose best observation currently clears the inlier threshold; falls
/// back to the `need` highest-posterior CFs when too few qualify.
fn inlying_cf_pool(
    groups: &[CfGroup],
    posteriors: &[f64],
    p_th: f64,
    need: usize,
) -> Vec<usize> {
    let best: Vec<f64> = groups
        .iter()
        .map(|g| {
            g.obs
                .iter()
                .map(|&i| posteriors[i])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let mut pool: Vec<usize> = (0..groups.len()).filter(|&g| best[g] > p_th).collect();
    if pool.len() < need {
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.sort_by(|&a, &b| best[b].total_cmp(&best[a]).then(a.cmp(&b)));
        pool = order.into_iter().take(need).collect();
        pool.sort_unstable();
    }
    pool
}

/// Leave-one-out weighted fit for fragment `k`: the `n_c + 1` nearest
/// inlying fragments (template-plane distance, excluding `k`) contribute all
/// their observations.
pub fn m_step_loocv(
    obs: &[VpcObs],
    groups: &[CfGroup],
    posteriors: &[f64],
    k: usize,
    pool_tree: &KdTree,
    degree: usize,
    scale: f64,
    stats: &mut SolverStats,
) -> Result<PolynomialTransform> {
    // Up to n_c + 1 nearest neighbors enter the fit; n_c suffice when the
    // pool is at its minimum (the failure rule counts total inlying CFs,
    // and an exactly determined well-conditioned system still solves).
    let want = n_coeffs(degree) + 1;
    let neighbors = pool_tree.k_nearest(groups[k].x, want, |id| id != k);
    if neighbors.len() < n_coeffs(degree) {
        return Err(RaeError::MStepFailure(format!(
            "{} inlying neighbors for fragment {}, need {}",
            neighbors.len(),
            groups[k].cf_index,
            n_coeffs(degree)
        )));
    }
    let idxs = neighbors
        .iter()
        .flat_map(|&(g, _)| groups[g].obs.iter().copied())
        .collect::<Vec<_>>();
    let (t, _) = weighted_fit(obs, idxs, posteriors, degree, scale, stats)?;
    Ok(t)
}

/// Inlier detection: posterior strictly above the threshold, at most one
/// observation per fragment (highest posterior, ties to the lower index).
pub fn detect_inliers(
    obs: &[VpcObs],
    groups: &[CfGroup],
    posteriors: &[f64],
    p_th: f64,
) -> Vec<usize> {
    let _ = obs;
    let mut out = Vec::new();
    for g in groups {
        let mut best: Option<usize> = None;
        for &i in &g.obs {
            if posteriors[i] > p_th {
                let better = match best {
                    None => true,
                    Some(b) => posteriors[i] > posteriors[b],
                };
                if better {
                    best = Some(i);
                }
            }
        }
        if let Some(b) = best {
            out.push(b);
        }
    }
    out
}

/// Complete-data expected log-likelihood at (transforms, p_cf) with the
/// given posteriors.
fn q_value(
    obs: &[VpcObs],
    groups: &[CfGroup],
    transforms: &[Option<PolynomialTransform>],
    p_cf: f64,
    posteriors: &[f64],
) -> f64 {
    let p_cf = clamp_p(p_cf);
    let mut q = 0.0;
    for (g, group) in groups.iter().enumerate() {
        let Some(t) = &transforms[g] else { continue };
        let p_pc = prior_pc_prob(p_cf, group.obs.len()).max(1e-300);
        let pred = t.eval(group.x);
        for &i in &group.obs {
            let o = &obs[i];
            let p = posteriors[i];
            let s2 = o.sigma_pc * o.sigma_pc;
            let r2 = (o.y - pred).norm_squared();
            q += -p * r2 / (2.0 * s2) - s2.ln() * p + p_pc.ln() * p
                + (1.0 - p_cf).ln() * (1.0 - p)
                + (1.0 / o.zone_area).ln();
        }
    }
    q
}

/// Run EM to a fixpoint from an initial transform guess.
///
/// Every fragment's prediction starts at `initial`; iterations alternate the
/// posterior update and the weighted refits until the relative Q change
/// drops below tolerance. A Q decrease beyond slack stops the run and
/// returns the best state seen (flagged as not converged).
pub fn em_run(
    obs: &[VpcObs],
    degree: usize,
    initial: &PolynomialTransform,
    cfg: &SolverConfig,
    stats: &mut SolverStats,
) -> Result<MixtureState> {
    let groups = group_by_cf(obs);
    let need_cf = n_coeffs(degree) + 2;
    if groups.len() < need_cf {
        return Err(RaeError::NotEnoughFragments {
            have: groups.len(),
            need: need_cf,
        });
    }
    let scale = pow2_scale(&groups);
    let mut transforms: Vec<Option<PolynomialTransform>> =
        vec![Some(initial.clone()); groups.len()];
    let mut posteriors = vec![cfg.init_p_cf; obs.len()];
    let mut p_cf = cfg.init_p_cf;
    let mut q_trace: Vec<f64> = Vec::new();
    let mut best: Option<MixtureState> = None;
    let mut converged = false;

    for _iter in 0..cfg.max_em_iters {
        stats.em_iterations += 1;
        posteriors = e_step(obs, &groups, &transforms, p_cf, &posteriors);
        p_cf = m_step_pcf(&groups, &posteriors)?;

        let pool = inlying_cf_pool(&groups, &posteriors, cfg.p_th, n_coeffs(degree) + 1);
        if cfg.loocv {
            let tree = KdTree::build(
                &pool
                    .iter()
                    .map(|&g| (g, groups[g].x))
                    .collect::<Vec<_>>(),
            );
            let mut new_transforms = Vec::with_capacity(groups.len());
            for k in 0..groups.len() {
                match m_step_loocv(obs, &groups, &posteriors, k, &tree, degree, scale, stats) {
                    Ok(t) => new_transforms.push(Some(t)),
                    Err(RaeError::DegenerateNeighborhood(_)) => {
                        // Prediction unavailable; the fragment keeps its
                        // previous posteriors for this iteration.
                        new_transforms.push(None);
                    }
                    Err(e) => return Err(e),
                }
            }
            transforms = new_transforms;
        } else {
            // Pooled variant: one fit over every inlying fragment, no
            // exclusion. Used to expose leverage behavior.
            let idxs: Vec<usize> = pool
                .iter()
                .flat_map(|&g| groups[g].obs.iter().copied())
                .collect();
            let (t, _) = weighted_fit(obs, idxs, &posteriors, degree, scale, stats)?;
            transforms = vec![Some(t); groups.len()];
        }

        let q = q_value(obs, &groups, &transforms, p_cf, &posteriors);
        let improved = match &best {
            None => true,
            Some(b) => q > b.q,
        };
        if improved {
            best = Some(MixtureState {
                p_cf,
                posteriors: posteriors.clone(),
                loocv_transforms: transforms.clone(),
                q,
                q_trace: Vec::new(),
                converged: false,
            });
        }
        if let Some(&prev) = q_trace.last() {
            let slack = 1e-9 * prev.abs().max(1.0);
            if q < prev - slack {
                // Q went down: the restricted M-step is not a strict
                // ascent step; stop and keep the best iterate.
                q_trace.push(q);
                break;
            }
            if (q - prev).abs() <= cfg.em_tol * prev.abs().max(1.0) {
                q_trace.push(q);
                converged = true;
                break;
            }
        }
        q_trace.push(q);
    }

    let mut state = best.ok_or_else(|| RaeError::MStepFailure("EM produced no state".into()))?;
    state.q_trace = q_trace;
    state.converged = converged;
    Ok(state)
}

/// Exact affine through three point pairs; None when the template centers
/// are collinear.
pub fn affine_from_triple(pairs: &[(Point, Point); 3]) -> Option<AffineTransform> {
    let mut m = nalgebra::Matrix3::zeros();
    for (r, (x, _)) in pairs.iter().enumerate() {
        m[(r, 0)] = 1.0;
        m[(r, 1)] = x.x;
        m[(r, 2)] = x.y;
    }
    let inv = m.try_inverse()?;
    let bi = nalgebra::Vector3::new(pairs[0].1.x, pairs[1].1.x, pairs[2].1.x);
    let bj = nalgebra::Vector3::new(pairs[0].1.y, pairs[1].1.y, pairs[2].1.y);
    let ci = inv * bi;
    let cj = inv * bj;
    let a = nalgebra::Matrix2::new(ci[1], ci[2], cj[1], cj[2]);
    if !a.iter().all(|v| v.is_finite()) || !ci[0].is_finite() || !cj[0].is_finite() {
        return None;
    }
    Some(AffineTransform {
        a,
        d: Point::new(ci[0], cj[0]),
    })
}

/// A seed transform is usable when it stays within the initial search budget
/// of the coarse transform everywhere; for affine differences the maximum
/// over a rectangle is attained at a corner.
pub fn seed_within_budget(
    seed: &AffineTransform,
    init: &PolynomialTransform,
    domain_corners: &[Point; 4],
    d_max0: f64,
) -> bool {
    domain_corners
        .iter()
        .all(|&x| (seed.apply(x) - init.eval(x)).norm() <= d_max0)
}

#[derive(Debug, Clone)]
pub struct MultistartOutcome {
    pub best: MixtureState,
    /// Valid seeds actually attempted.
    pub n_starts_used: usize,
    /// Final transform of every successful start (final-fit inputs differ;
    /// this is the max-posterior LOOCV consensus fit for diagnostics).
    pub per_start_transforms: Vec<PolynomialTransform>,
}

/// Multistart EM: seed affines from random triples of observations in
/// distinct fragments, validated against the initial-search budget; EM runs
/// from the first `n_starts` valid seeds and the best final Q wins.
pub fn multistart(
    obs: &[VpcObs],
    degree: usize,
    init: &PolynomialTransform,
    d_max0: f64,
    domain_corners: &[Point; 4],
    cfg: &SolverConfig,
    seed: u64,
    stats: &mut SolverStats,
) -> Result<MultistartOutcome> {
    let groups = group_by_cf(obs);
    if groups.len() < 3 {
        return Err(RaeError::NotEnoughFragments {
            have: groups.len(),
            need: 3,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut seeds: Vec<PolynomialTransform> = Vec::new();
    let max_attempts = 200 * cfg.n_starts.max(1);
    for _ in 0..max_attempts {
        if seeds.len() >= cfg.n_starts {
            break;
        }
        let (a, b, c) = (
            rng.gen_range(0..obs.len()),
            rng.gen_range(0..obs.len()),
            rng.gen_range(0..obs.len()),
        );
        let mut key = [a, b, c];
        key.sort_unstable();
        if key[0] == key[1] || key[1] == key[2] {
            continue;
        }
        let cfs = [obs[a].cf_index, obs[b].cf_index, obs[c].cf_index];
        if cfs[0] == cfs[1] || cfs[1] == cfs[2] || cfs[0] == cfs[2] {
            continue;
        }
        if !seen.insert(key) {
            continue;
        }
        let pairs = [
            (obs[a].x, obs[a].y),
            (obs[b].x, obs[b].y),
            (obs[c].x, obs[c].y),
        ];
        let Some(aff) = affine_from_triple(&pairs) else {
            continue;
        };
        if seed_within_budget(&aff, init, domain_corners, d_max0) {
            seeds.push(PolynomialTransform::from_affine(&aff, degree));
        }
    }
    if seeds.is_empty() {
        return Err(RaeError::NoValidStarts);
    }

    // Independent EM runs; deterministic argmax by (Q, seed order).
    let results: Vec<(Result<MixtureState>, SolverStats)> = seeds
        .par_iter()
        .map(|s| {
            let mut st = SolverStats::default();
            (em_run(obs, degree, s, cfg, &mut st), st)
        })
        .collect();
    let n_starts_used = seeds.len();
    let mut best: Option<MixtureState> = None;
    let mut per_start = Vec::new();
    for (res, st) in results {
        stats.basis_evals += st.basis_evals;
        stats.em_iterations += st.em_iterations;
        if let Ok(state) = res {
            if let Some(t) = consensus_transform(&state) {
                per_start.push(t);
            }
            let better = match &best {
                None => true,
                Some(b) => state.q > b.q,
            };
            if better {
                best = Some(state);
            }
        }
    }
    let best = best.ok_or(RaeError::NoValidStarts)?;
    Ok(MultistartOutcome {
        best,
        n_starts_used,
        per_start_transforms: per_start,
    })
}

/// Representative transform of a state: the LOOCV prediction of the
/// highest-posterior fragment (diagnostic use).
fn consensus_transform(state: &MixtureState) -> Option<PolynomialTransform> {
    state
        .loocv_transforms
        .iter()
        .flatten()
        .next()
        .cloned()
}

/// Final fit over the detected inliers (no leave-one-out exclusion):
/// transform plus coefficient covariance `R_c = I^-1`.
pub fn final_fit(
    obs: &[VpcObs],
    inliers: &[usize],
    posteriors: &[f64],
    degree: usize,
    stats: &mut SolverStats,
) -> Result<GlobalEstimate> {
    let nc = n_coeffs(degree);
    if inliers.len() < nc {
        return Err(RaeError::RankDeficient);
    }
    let groups = group_by_cf(obs);
    let scale = pow2_scale(&groups);
    let (transform, r_c) = weighted_fit(
        obs,
        inliers.iter().copied(),
        posteriors,
        degree,
        scale,
        stats,
    )
    .map_err(|e| match e {
        RaeError::DegenerateNeighborhood(_) | RaeError::MStepFailure(_) => RaeError::RankDeficient,
        other => other,
    })?;
    Ok(GlobalEstimate {
        transform,
        r_c,
        inlier_obs: inliers.to_vec(),
    })
}

/// Pointwise registration-error SD from the coefficient covariance:
/// `sqrt(e(x) R_c e(x)^T)`.
pub fn sigma_reg(est: &GlobalEstimate, x: Point) -> f64 {
    sigma_reg_from(&est.r_c, est.transform.degree, x)
}

pub fn sigma_reg_from(r_c: &DMatrix<f64>, degree: usize, x: Point) -> f64 {
    let e = monomials(degree, x);
    (r_c * &e).dot(&e).max(0.0).sqrt()
}
