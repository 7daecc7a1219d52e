//! Loop detection and Sim(3) constraint estimation.
//!
//! For a new keyframe: query the BoW database, match descriptors against each
//! candidate, seed an SE(3) guess by RANSAC PnP, refine a Sim(3) on the hybrid
//! 3D/2D cost and verify the result.

pub mod pnp;
pub mod sim3;

pub use pnp::{p3p, ransac_pnp, PnpResult, RansacConfig};
pub use sim3::{estimate_sim3, estimate_sim3_from, Sim3Estimate, Sim3SolverConfig};

use crate::bow::{KeyframeDatabase, KeyframeId, QueryResult};
use crate::camera::{CameraIntrinsics, InverseDepthPoint};
use crate::features::{match_descriptors, BinaryDescriptor, MatchConfig};
use crate::keyframe::Keyframe;
use crate::liegroup::{LieError, Sim3Pose};
use nalgebra::Vector2;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("{got} matches, need at least {need}")]
    TooFewMatches { got: usize, need: usize },
    #[error("RANSAC found {inliers} inliers, need {need}")]
    RansacFailure { inliers: usize, need: usize },
    #[error("Sim(3) solver diverged")]
    Diverged,
    #[error("normal matrix is rank deficient (condition {condition:.3e})")]
    RankDeficient { condition: f64 },
    #[error("match with non-positive inverse depth")]
    InvalidDepth,
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Lie(#[from] LieError),
}

/// A reference point with depth matched to a pixel of the current keyframe,
/// optionally with depth there too.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    pub p_ref: InverseDepthPoint,
    pub q_cur: Vector2<f64>,
    pub q_depth: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopConstraint {
    pub id_ref: KeyframeId,
    pub id_cur: KeyframeId,
    /// Maps reference-camera coordinates to current-camera coordinates.
    pub s_cr: Sim3Pose,
    pub inliers: usize,
    pub mean_residual_2d: f64,
    pub mean_residual_3d: f64,
    /// Median depth of the matched reference points, meters.
    pub median_depth: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyConfig {
    pub min_inliers: usize,
    pub max_residual_2d: f64,
    /// Fraction of the median scene depth.
    pub max_residual_3d_ratio: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            min_inliers: 20,
            max_residual_2d: 2.0,
            max_residual_3d_ratio: 0.05,
        }
    }
}

pub fn verify(c: &LoopConstraint, cfg: &VerifyConfig) -> bool {
    c.inliers >= cfg.min_inliers
        && c.mean_residual_2d <= cfg.max_residual_2d
        && c.mean_residual_3d <= cfg.max_residual_3d_ratio * c.median_depth
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopConfig {
    /// BoW candidates examined per keyframe.
    pub max_candidates: usize,
    pub min_score: f64,
    pub min_matches: usize,
    /// The query and this many preceding keyframes are never proposed.
    pub exclude_recent: u32,
    pub matching: MatchConfig,
    pub ransac: RansacConfig,
    pub verify: VerifyConfig,
    /// Optional override of the depth-derived solver settings.
    pub solver: Option<Sim3SolverConfig>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            max_candidates: 3,
            min_score: 0.05,
            min_matches: 20,
            exclude_recent: 7,
            matching: MatchConfig::default(),
            ransac: RansacConfig::default(),
            verify: VerifyConfig::default(),
            solver: None,
        }
    }
}

/// Matches the depth-bearing corners of `reference` against all corners of `current`.
pub fn match_keyframes(reference: &Keyframe, current: &Keyframe, cfg: &MatchConfig) -> Vec<MatchedPair> {
    let ref_idx: Vec<usize> = (0..reference.corners.len())
        .filter(|&i| reference.corners[i].inv_depth.is_some_and(|d| d > 0.0))
        .collect();
    let ref_desc: Vec<BinaryDescriptor> = ref_idx.iter().map(|&i| reference.corners[i].descriptor).collect();
    let cur_desc: Vec<BinaryDescriptor> = current.corners.iter().map(|c| c.descriptor).collect();
    match_descriptors(&ref_desc, &cur_desc, cfg)
        .into_iter()
        .map(|m| {
            let r = &reference.corners[ref_idx[m.idx_ref]];
            let c = &current.corners[m.idx_cur];
            MatchedPair {
                p_ref: InverseDepthPoint {
                    pixel: r.pixel,
                    inv_depth: r.inv_depth.unwrap_or(0.0),
                },
                q_cur: c.pixel,
                q_depth: c.inv_depth.filter(|d| *d > 0.0),
            }
        })
        .collect()
}

pub struct Candidate {
    pub keyframe: Arc<Keyframe>,
    pub score: f64,
    pub matches: Vec<MatchedPair>,
}

/// Ranked BoW candidates for `current`, before descriptor matching.
pub fn query_candidates(current: &Keyframe, db: &KeyframeDatabase, cfg: &LoopConfig) -> Vec<QueryResult> {
    if current.corners.is_empty() || current.bow.is_empty() {
        return Vec::new();
    }
    let lo = current.id.saturating_sub(cfg.exclude_recent);
    let exclude: BTreeSet<KeyframeId> = (lo..=current.id).collect();
    db.query(&current.bow, cfg.max_candidates, &exclude, cfg.min_score)
}

/// BoW candidates for `current`, each with its descriptor matches; candidates
/// with fewer than `min_matches` matches are dropped.
pub fn propose_and_match(
    current: &Keyframe,
    db: &KeyframeDatabase,
    keyframes: &BTreeMap<KeyframeId, Arc<Keyframe>>,
    cfg: &LoopConfig,
) -> Vec<Candidate> {
    query_candidates(current, db, cfg)
        .into_iter()
        .filter_map(|r| {
            let kf = keyframes.get(&r.id)?;
            let matches = match_keyframes(kf, current, &cfg.matching);
            (matches.len() >= cfg.min_matches).then(|| Candidate {
                keyframe: Arc::clone(kf),
                score: r.score,
                matches,
            })
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// RANSAC PnP, Sim(3) refinement on the inliers and verification.
pub fn compute_constraint(
    id_ref: KeyframeId,
    id_cur: KeyframeId,
    matches: &[MatchedPair],
    k: &CameraIntrinsics,
    cfg: &LoopConfig,
) -> Result<LoopConstraint, LoopError> {
    let pnp = ransac_pnp(matches, k, &cfg.ransac)?;
    let inlier_matches: Vec<MatchedPair> = matches
        .iter()
        .zip(&pnp.inliers)
        .filter(|(_, &b)| b)
        .map(|(m, _)| *m)
        .collect();
    let median_depth = median(inlier_matches.iter().map(|m| 1.0 / m.p_ref.inv_depth).collect());
    let solver = cfg.solver.unwrap_or_else(|| Sim3SolverConfig::from_median_depth(median_depth));
    let est = estimate_sim3(&inlier_matches, &pnp.pose, k, &solver)?;

    // final inliers: reprojection within the RANSAC threshold
    let mut n = 0usize;
    let (mut sum2, mut sum3, mut n3) = (0.0, 0.0, 0usize);
    for (r2, r3) in est.residuals_2d.iter().zip(&est.residuals_3d) {
        if *r2 >= cfg.ransac.threshold_px {
            continue;
        }
        n += 1;
        sum2 += r2;
        if let Some(r3) = r3 {
            sum3 += r3;
            n3 += 1;
        }
    }
    let mut c = LoopConstraint {
        id_ref,
        id_cur,
        s_cr: est.s_cr,
        inliers: n,
        mean_residual_2d: if n > 0 { sum2 / n as f64 } else { f64::INFINITY },
        mean_residual_3d: if n3 > 0 { sum3 / n3 as f64 } else { 0.0 },
        median_depth,
        accepted: false,
    };
    c.accepted = verify(&c, &cfg.verify);
    Ok(c)
}

/// Every constraint attempted for `current`, in candidate rank order.
pub fn detect_loops(
    current: &Keyframe,
    db: &KeyframeDatabase,
    keyframes: &BTreeMap<KeyframeId, Arc<Keyframe>>,
    k: &CameraIntrinsics,
    cfg: &LoopConfig,
) -> Vec<Result<LoopConstraint, (KeyframeId, LoopError)>> {
    propose_and_match(current, db, keyframes, cfg)
        .into_iter()
        .map(|c| {
            let mut local = *cfg;
            local.ransac.seed = cfg.ransac.seed ^ ((c.keyframe.id as u64) << 32 | current.id as u64);
            compute_constraint(c.keyframe.id, current.id, &c.matches, k, &local).map_err(|e| (c.keyframe.id, e))
        })
        .collect()
}
