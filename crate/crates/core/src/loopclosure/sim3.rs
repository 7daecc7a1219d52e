//! Hybrid 3D/2D Sim(3) estimation between a reference and a current keyframe.
//!
//! Depth-bearing matches contribute the 3D residual `S X_ref - Y_cur`, pixel-only
//! matches the reprojection residual `pi(S X_ref) - q`. Only the 3D part
//! constrains scale.

use super::{LoopError, MatchedPair};
use crate::camera::{CameraIntrinsics, InverseDepthPoint};
use crate::liegroup::{hat, Matrix7, SE3Pose, Sim3Pose, Sim3Tangent, Vector7};
use nalgebra::{Matrix2x3, Matrix3, SMatrix, Vector2, Vector3};

pub type Matrix3x7 = SMatrix<f64, 3, 7>;
pub type Matrix2x7 = SMatrix<f64, 2, 7>;

/// Condition number of the (Jacobi-scaled) normal matrix above which the
/// problem is reported as rank deficient.
pub const MAX_CONDITION: f64 = 1e12;
/// Consecutive rejected steps before giving up.
pub const MAX_FAILED_STEPS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3SolverConfig {
    /// Weight of 3D residuals, 1/m^2.
    pub w1: f64,
    /// Weight of 2D residuals, 1/px^2.
    pub w2: f64,
    pub huber_3d: f64,
    pub huber_2d: f64,
    pub max_iterations: usize,
    pub convergence_eps: f64,
    /// Solve only the rigid part, keeping the initial scale.
    pub fix_scale: bool,
}

impl Sim3SolverConfig {
    /// Weights and kernels scaled to the scene: sigma_3d = 0.05 median depth,
    /// sigma_2d = 1 px, Huber deltas 0.1 median depth and 2 px.
    pub fn from_median_depth(median_depth: f64) -> Self {
        let sigma_3d = 0.05 * median_depth;
        Self {
            w1: 1.0 / (sigma_3d * sigma_3d),
            w2: 1.0,
            huber_3d: 0.1 * median_depth,
            huber_2d: 2.0,
            max_iterations: 100,
            convergence_eps: 1e-10,
            fix_scale: false,
        }
    }

    fn validate(&self) -> Result<(), LoopError> {
        if !(self.w1 >= 0.0 && self.w2 >= 0.0) || self.w1 + self.w2 <= 0.0 {
            return Err(LoopError::InvalidConfig("w1, w2 must be >= 0 and not both zero".into()));
        }
        if !(self.huber_3d > 0.0 && self.huber_2d > 0.0) {
            return Err(LoopError::InvalidConfig("Huber deltas must be positive".into()));
        }
        Ok(())
    }
}

/// Huber cost on a residual norm: `e^2` inside, `2 delta e - delta^2` outside.
pub fn huber(e: f64, delta: f64) -> f64 {
    if e <= delta {
        e * e
    } else {
        2.0 * delta * e - delta * delta
    }
}

fn huber_weight(e: f64, delta: f64) -> f64 {
    if e <= delta {
        1.0
    } else {
        delta / e
    }
}

/// One match lifted to the geometry the cost needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Term {
    /// Reference point and current point, both in their camera frames.
    Depth { x: Vector3<f64>, y: Vector3<f64> },
    /// Reference point and current pixel.
    Pixel { x: Vector3<f64>, q: Vector2<f64> },
}

pub fn lift_matches(matches: &[MatchedPair], k: &CameraIntrinsics) -> Result<Vec<Term>, LoopError> {
    matches
        .iter()
        .map(|m| {
            let x = k.backproject(&m.p_ref).map_err(|_| LoopError::InvalidDepth)?;
            Ok(match m.q_depth {
                Some(d) => Term::Depth {
                    x,
                    y: k
                        .backproject(&InverseDepthPoint {
                            pixel: m.q_cur,
                            inv_depth: d,
                        })
                        .map_err(|_| LoopError::InvalidDepth)?,
                },
                None => Term::Pixel { x, q: m.q_cur },
            })
        })
        .collect()
}

/// `d(exp(delta) S x)/d delta` at `delta = 0`, with `z = S x`.
fn point_jacobian(z: &Vector3<f64>) -> Matrix3x7 {
    let mut j = Matrix3x7::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat(z)));
    j.fixed_view_mut::<3, 1>(0, 6).copy_from(z);
    j
}

pub fn residual_3d(s: &Sim3Pose, x: &Vector3<f64>, y: &Vector3<f64>) -> Vector3<f64> {
    s.act(x) - y
}

/// Jacobian of [`residual_3d`] under the left update `S <- exp(delta) S`.
pub fn jacobian_3d(s: &Sim3Pose, x: &Vector3<f64>) -> Matrix3x7 {
    point_jacobian(&s.act(x))
}

pub fn residual_2d(s: &Sim3Pose, x: &Vector3<f64>, q: &Vector2<f64>, k: &CameraIntrinsics) -> Vector2<f64> {
    k.project_unchecked(&s.act(x)) - q
}

/// Jacobian of [`residual_2d`] under the left update `S <- exp(delta) S`.
pub fn jacobian_2d(s: &Sim3Pose, x: &Vector3<f64>, k: &CameraIntrinsics) -> Matrix2x7 {
    let z = s.act(x);
    let jp: Matrix2x3<f64> = k.projection_jacobian(&z);
    jp * point_jacobian(&z)
}

/// Total robust cost of the hybrid objective.
pub fn sim3_cost(terms: &[Term], s: &Sim3Pose, k: &CameraIntrinsics, cfg: &Sim3SolverConfig) -> f64 {
    terms
        .iter()
        .map(|t| match t {
            Term::Depth { x, y } => {
                if cfg.w1 == 0.0 {
                    0.0
                } else {
                    cfg.w1 * huber(residual_3d(s, x, y).norm(), cfg.huber_3d)
                }
            }
            Term::Pixel { x, q } => {
                if s.act(x).z <= 0.0 {
                    return f64::INFINITY;
                }
                cfg.w2 * huber(residual_2d(s, x, q, k).norm(), cfg.huber_2d)
            }
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sim3Estimate {
    /// Reference-to-current similarity.
    pub s_cr: Sim3Pose,
    pub cost: f64,
    pub iterations: usize,
    /// Reprojection error of every match, pixels.
    pub residuals_2d: Vec<f64>,
    /// 3D error of every depth-bearing match, meters.
    pub residuals_3d: Vec<Option<f64>>,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

fn normal_equations(
    terms: &[Term],
    s: &Sim3Pose,
    k: &CameraIntrinsics,
    cfg: &Sim3SolverConfig,
) -> (Matrix7, Vector7) {
    let mut h = Matrix7::zeros();
    let mut g = Vector7::zeros();
    for t in terms {
        match t {
            Term::Depth { x, y } => {
                if cfg.w1 == 0.0 {
                    continue;
                }
                let r = residual_3d(s, x, y);
                let w = cfg.w1 * huber_weight(r.norm(), cfg.huber_3d);
                let j = jacobian_3d(s, x);
                h += w * j.transpose() * j;
                g += w * j.transpose() * r;
            }
            Term::Pixel { x, q } => {
                if cfg.w2 == 0.0 {
                    continue;
                }
                let r = residual_2d(s, x, q, k);
                let w = cfg.w2 * huber_weight(r.norm(), cfg.huber_2d);
                let j = jacobian_2d(s, x, k);
                h += w * j.transpose() * j;
                g += w * j.transpose() * r;
            }
        }
    }
    (h, g)
}

/// Condition number of the Jacobi-scaled matrix restricted to `dim` leading
/// coordinates.
fn scaled_condition(h: &Matrix7, dim: usize) -> f64 {
    let sub = h.view((0, 0), (dim, dim)).into_owned();
    let d: Vec<f64> = (0..dim).map(|i| sub[(i, i)]).collect();
    let dmax = d.iter().fold(0.0f64, |m, &x| m.max(x));
    if d.iter().any(|&x| !(x > 1e-12 * dmax)) {
        return f64::INFINITY;
    }
    let mut m = sub.clone();
    for i in 0..dim {
        for j in 0..dim {
            m[(i, j)] /= (d[i] * d[j]).sqrt();
        }
    }
    let ev = m.symmetric_eigenvalues();
    let max = ev.max();
    let min = ev.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn solve_step(h: &Matrix7, g: &Vector7, lambda: f64, dim: usize) -> Option<Vector7> {
    let mut a = h.view((0, 0), (dim, dim)).into_owned();
    for i in 0..dim {
        a[(i, i)] += lambda * a[(i, i)].max(1e-12);
    }
    let b = -g.rows(0, dim).into_owned();
    let x = a.cholesky()?.solve(&b);
    let mut out = Vector7::zeros();
    out.rows_mut(0, dim).copy_from(&x);
    Some(out)
}

/// Gauss-Newton on the hybrid cost with a Levenberg fallback whenever the plain
/// step does not decrease the cost.
pub fn estimate_sim3(
    matches: &[MatchedPair],
    init: &SE3Pose,
    k: &CameraIntrinsics,
    cfg: &Sim3SolverConfig,
) -> Result<Sim3Estimate, LoopError> {
    estimate_sim3_from(matches, &init.to_sim3(), k, cfg)
}

/// As [`estimate_sim3`] but seeded with a full similarity.
pub fn estimate_sim3_from(
    matches: &[MatchedPair],
    init: &Sim3Pose,
    k: &CameraIntrinsics,
    cfg: &Sim3SolverConfig,
) -> Result<Sim3Estimate, LoopError> {
    cfg.validate()?;
    if matches.is_empty() {
        return Err(LoopError::TooFewMatches { got: 0, need: 1 });
    }
    let terms = lift_matches(matches, k)?;
    let dim = if cfg.fix_scale { 6 } else { 7 };
    let mut s = *init;
    let mut cost = sim3_cost(&terms, &s, k, cfg);
    if !cost.is_finite() {
        return Err(LoopError::Diverged);
    }
    let mut history = vec![cost];
    let mut iterations = 0;
    let mut lambda = 0.0;
    let mut failures = 0;
    while iterations < cfg.max_iterations {
        let (h, g) = normal_equations(&terms, &s, k, cfg);
        let cond = scaled_condition(&h, dim);
        if !(cond <= MAX_CONDITION) {
            return Err(LoopError::RankDeficient { condition: cond });
        }
        let Some(delta) = solve_step(&h, &g, lambda, dim) else {
            return Err(LoopError::RankDeficient {
                condition: f64::INFINITY,
            });
        };
        if delta.norm() < cfg.convergence_eps {
            break;
        }
        let candidate = Sim3Pose::exp(&Sim3Tangent::from_vector(&delta)).compose(&s);
        let next = sim3_cost(&terms, &candidate, k, cfg);
        iterations += 1;
        if next <= cost {
            let converged = cost - next <= 1e-15 * cost.max(f64::MIN_POSITIVE);
            s = candidate;
            cost = next;
            history.push(cost);
            failures = 0;
            lambda = if lambda > 0.0 { (lambda * 0.1).max(1e-9) } else { 0.0 };
            if converged && lambda == 0.0 {
                break;
            }
        } else {
            failures += 1;
            if failures >= MAX_FAILED_STEPS {
                // a stalled minimum is not divergence
                if (next - cost) <= 1e-12 * cost.max(1e-300) {
                    break;
                }
                return Err(LoopError::Diverged);
            }
            lambda = if lambda == 0.0 { 1e-4 } else { lambda * 10.0 };
        }
    }

    let residuals_2d = terms
        .iter()
        .zip(matches)
        .map(|(t, m)| {
            let x = match t {
                Term::Depth { x, .. } | Term::Pixel { x, .. } => x,
            };
            residual_2d(&s, x, &m.q_cur, k).norm()
        })
        .collect();
    let residuals_3d = terms
        .iter()
        .map(|t| match t {
            Term::Depth { x, y } => Some(residual_3d(&s, x, y).norm()),
            Term::Pixel { .. } => None,
        })
        .collect();
    Ok(Sim3Estimate {
        s_cr: s,
        cost,
        iterations,
        residuals_2d,
        residuals_3d,
        cost_history: history,
    })
}
