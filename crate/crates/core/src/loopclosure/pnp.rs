//! P3P minimal solver and RANSAC PnP.

use super::{LoopError, MatchedPair};
use crate::camera::CameraIntrinsics;
use crate::eval::umeyama;
use crate::liegroup::{hat, SE3Pose, Vector6};
use nalgebra::{Matrix6, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    /// Reprojection inlier threshold in pixels.
    pub threshold_px: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub min_inliers: usize,
    /// Gauss-Newton steps of the final re-fit.
    pub refine_iterations: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold_px: 3.0,
            confidence: 0.99,
            max_iterations: 500,
            min_inliers: 12,
            refine_iterations: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpResult {
    /// Reference-to-current rigid pose.
    pub pose: SE3Pose,
    pub inliers: Vec<bool>,
    pub num_inliers: usize,
    pub iterations: usize,
}

/// Real roots of `c[0] x^n + ... + c[n]`, leading near-zero coefficients dropped.
fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let start = coeffs
        .iter()
        .position(|c| c.abs() > 1e-14 * scale)
        .unwrap_or(coeffs.len());
    let c: Vec<f64> = coeffs[start..].iter().map(|x| x / coeffs[start]).collect();
    let n = c.len().saturating_sub(1);
    let eval = |x: f64| c.iter().fold(0.0, |acc, k| acc * x + k);
    let deriv = |x: f64| {
        c.iter()
            .take(n)
            .enumerate()
            .fold(0.0, |acc, (i, k)| acc * x + k * (n - i) as f64)
    };
    let candidates: Vec<(f64, f64)> = match n {
        0 => Vec::new(),
        1 => vec![(-c[1], 0.0)],
        _ => {
            let mut m = nalgebra::DMatrix::<f64>::zeros(n, n);
            for j in 0..n {
                m[(0, j)] = -c[j + 1];
            }
            for i in 1..n {
                m[(i, i - 1)] = 1.0;
            }
            m.complex_eigenvalues().iter().map(|z| (z.re, z.im)).collect()
        }
    };
    let mut roots = Vec::new();
    for (re, im) in candidates {
        if im.abs() > 1e-6 * (1.0 + re.abs()) {
            continue;
        }
        let mut x = re;
        for _ in 0..8 {
            let d = deriv(x);
            if d == 0.0 {
                break;
            }
            let step = eval(x) / d;
            x -= step;
            if step.abs() < 1e-15 * (1.0 + x.abs()) {
                break;
            }
        }
        if x.is_finite() {
            roots.push(x);
        }
    }
    roots
}

/// Grunert's three-point solution. `bearings` are unit rays in the camera
/// frame, `world` the corresponding points. Returns up to four
/// world-to-camera poses.
pub fn p3p(world: &[Vector3<f64>; 3], bearings: &[Vector3<f64>; 3]) -> Vec<SE3Pose> {
    let [p1, p2, p3] = world;
    let [f1, f2, f3] = bearings;
    let a2 = (p2 - p3).norm_squared();
    let b2 = (p1 - p3).norm_squared();
    let c2 = (p1 - p2).norm_squared();
    if a2 < 1e-18 || b2 < 1e-18 || c2 < 1e-18 {
        return Vec::new();
    }
    let ca = f2.dot(f3);
    let cb = f1.dot(f3);
    let cg = f1.dot(f2);

    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let a4 = (amc - 1.0).powi(2) - 4.0 * c2 / b2 * ca * ca;
    let a3 = 4.0
        * (amc * (1.0 - amc) * cb - (1.0 - apc) * ca * cg + 2.0 * c2 / b2 * ca * ca * cb);
    let a2c = 2.0
        * (amc * amc - 1.0 + 2.0 * amc * amc * cb * cb + 2.0 * (b2 - c2) / b2 * ca * ca
            - 4.0 * apc * ca * cb * cg
            + 2.0 * (b2 - a2) / b2 * cg * cg);
    let a1 = 4.0 * (-amc * (1.0 + amc) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - apc) * ca * cg);
    let a0 = (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cg * cg;

    let mut out = Vec::new();
    for v in real_roots(&[a4, a3, a2c, a1, a0]) {
        if v <= 0.0 {
            continue;
        }
        let denom = 2.0 * (cg - v * ca);
        if denom.abs() < 1e-12 {
            continue;
        }
        let u = ((-1.0 + amc) * v * v - 2.0 * amc * cb * v + 1.0 + amc) / denom;
        if u <= 0.0 {
            continue;
        }
        let q = 1.0 + v * v - 2.0 * v * cb;
        if q <= 0.0 {
            continue;
        }
        let s1 = (b2 / q).sqrt();
        let cam = [f1 * s1, f2 * (u * s1), f3 * (v * s1)];
        if let Ok(s) = umeyama(&world[..], &cam[..], false) {
            out.push(s.to_se3());
        }
    }
    out
}

fn reprojection_error(k: &CameraIntrinsics, pose: &SE3Pose, x: &Vector3<f64>, q: &Vector2<f64>) -> f64 {
    let z = pose.act(x);
    if z.z <= 1e-9 {
        return f64::INFINITY;
    }
    (k.project_unchecked(&z) - q).norm()
}

fn count_inliers(
    k: &CameraIntrinsics,
    pose: &SE3Pose,
    pts: &[Vector3<f64>],
    obs: &[Vector2<f64>],
    thr: f64,
) -> (Vec<bool>, usize) {
    let mask: Vec<bool> = pts
        .iter()
        .zip(obs)
        .map(|(x, q)| reprojection_error(k, pose, x, q) < thr)
        .collect();
    let n = mask.iter().filter(|&&b| b).count();
    (mask, n)
}

/// Gauss-Newton on reprojection error with left-multiplicative SE(3) updates.
pub fn refine_pose(
    k: &CameraIntrinsics,
    mut pose: SE3Pose,
    pts: &[Vector3<f64>],
    obs: &[Vector2<f64>],
    iterations: usize,
) -> SE3Pose {
    let cost = |p: &SE3Pose| -> f64 {
        pts.iter()
            .zip(obs)
            .map(|(x, q)| reprojection_error(k, p, x, q).powi(2))
            .sum()
    };
    let mut current = cost(&pose);
    for _ in 0..iterations {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for (x, q) in pts.iter().zip(obs) {
            let z = pose.act(x);
            if z.z <= 1e-9 {
                continue;
            }
            let r = k.project_unchecked(&z) - q;
            let mut jz = nalgebra::Matrix3x6::zeros();
            jz.fixed_view_mut::<3, 3>(0, 0).copy_from(&nalgebra::Matrix3::identity());
            jz.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat(&z)));
            let j = k.projection_jacobian(&z) * jz;
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        let Some(delta) = h.cholesky().map(|c| c.solve(&(-g))) else {
            break;
        };
        let candidate = SE3Pose::exp(&delta).compose(&pose);
        let next = cost(&candidate);
        if !(next <= current) {
            break;
        }
        pose = candidate;
        current = next;
        if delta.norm() < 1e-14 {
            break;
        }
    }
    pose
}

/// RANSAC over P3P hypotheses, each disambiguated by a fourth sampled point,
/// followed by a Gauss-Newton re-fit on the inliers.
pub fn ransac_pnp(
    matches: &[MatchedPair],
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<PnpResult, LoopError> {
    let need = cfg.min_inliers.max(4);
    if matches.len() < 4 {
        return Err(LoopError::TooFewMatches {
            got: matches.len(),
            need: 4,
        });
    }
    let mut pts = Vec::with_capacity(matches.len());
    for m in matches {
        pts.push(k.backproject(&m.p_ref).map_err(|_| LoopError::InvalidDepth)?);
    }
    let obs: Vec<Vector2<f64>> = matches.iter().map(|m| m.q_cur).collect();
    let bearings: Vec<Vector3<f64>> = obs.iter().map(|q| k.bearing(q)).collect();
    let n = matches.len();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(SE3Pose, usize)> = None;
    let mut budget = cfg.max_iterations;
    let mut iterations = 0;
    while iterations < budget {
        iterations += 1;
        let mut idx = [0usize; 4];
        for i in 0..4 {
            loop {
                let c = rng.random_range(0..n);
                if !idx[..i].contains(&c) {
                    idx[i] = c;
                    break;
                }
            }
        }
        let world = [pts[idx[0]], pts[idx[1]], pts[idx[2]]];
        let rays = [bearings[idx[0]], bearings[idx[1]], bearings[idx[2]]];
        let hypothesis = p3p(&world, &rays)
            .into_iter()
            .map(|p| (reprojection_error(k, &p, &pts[idx[3]], &obs[idx[3]]), p))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        let Some((err4, pose)) = hypothesis else {
            continue;
        };
        if !(err4 < cfg.threshold_px) {
            continue;
        }
        let (_, count) = count_inliers(k, &pose, &pts, &obs, cfg.threshold_px);
        if best.as_ref().is_none_or(|b| count > b.1) {
            best = Some((pose, count));
            let w = count as f64 / n as f64;
            let denom = (1.0 - w.powi(4)).ln();
            if denom < 0.0 {
                let needed = ((1.0 - cfg.confidence).ln() / denom).ceil();
                if needed.is_finite() && needed >= 0.0 {
                    budget = budget.min(needed as usize);
                }
            } else {
                budget = iterations;
            }
        }
    }

    let Some((pose, count)) = best else {
        return Err(LoopError::RansacFailure { inliers: 0, need });
    };
    if count < need {
        return Err(LoopError::RansacFailure { inliers: count, need });
    }
    let (mask, _) = count_inliers(k, &pose, &pts, &obs, cfg.threshold_px);
    let (ip, io): (Vec<_>, Vec<_>) = mask
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| (pts[i], obs[i]))
        .unzip();
    let refined = refine_pose(k, pose, &ip, &io, cfg.refine_iterations);
    let (mask, num_inliers) = count_inliers(k, &refined, &pts, &obs, cfg.threshold_px);
    if num_inliers < need {
        return Err(LoopError::RansacFailure {
            inliers: num_inliers,
            need,
        });
    }
    Ok(PnpResult {
        pose: refined,
        inliers: mask,
        num_inliers,
        iterations,
    })
}
