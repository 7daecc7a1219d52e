//! Trajectory alignment and error metrics.
//!
//! Trajectory poses follow the TUM convention: camera-to-world, so the
//! translation of each pose is the camera position.

use crate::liegroup::Sim3Pose;
use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

/// Maximum timestamp difference for associating two trajectory entries.
pub const ASSOCIATION_WINDOW: f64 = 0.02;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate point configuration (collinear or coincident points)")]
    DegenerateConfiguration,
    #[error("only {0} associated poses, need at least 3")]
    NoAssociations(usize),
    #[error("point lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("timestamps must be strictly increasing (line {0})")]
    NonMonotonic(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryEntry {
    pub timestamp: f64,
    /// Camera-to-world pose.
    pub pose: Sim3Pose,
    pub id: u32,
}

impl TrajectoryEntry {
    pub fn position(&self) -> Vector3<f64> {
        self.pose.translation
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub entries: Vec<TrajectoryEntry>,
    /// Whether the TUM file carries a trailing scale column.
    pub with_scale: bool,
}

impl Trajectory {
    pub fn new(entries: Vec<TrajectoryEntry>, with_scale: bool) -> Result<Self, EvalError> {
        for (i, w) in entries.windows(2).enumerate() {
            if !(w[1].timestamp > w[0].timestamp) {
                return Err(EvalError::NonMonotonic(i + 2));
            }
        }
        Ok(Self { entries, with_scale })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.entries.iter().map(|e| e.position()).collect()
    }

    /// Entries whose timestamps lie in `[t0, t1]`.
    pub fn segment(&self, t0: f64, t1: f64) -> Trajectory {
        Trajectory {
            entries: self
                .entries
                .iter()
                .filter(|e| e.timestamp >= t0 && e.timestamp <= t1)
                .copied()
                .collect(),
            with_scale: self.with_scale,
        }
    }

    pub fn to_tum_string(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let t = &e.pose.translation;
            let q = e.pose.rotation.quaternion();
            let _ = write!(s, "{} {} {} {} {} {} {} {}", e.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w);
            if self.with_scale {
                let _ = write!(s, " {}", e.pose.scale);
            }
            s.push('\n');
        }
        s
    }

    pub fn parse_tum(text: &str, source: &str) -> Result<Self, EvalError> {
        let mut entries = Vec::new();
        let mut with_scale = None;
        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| EvalError::Parse {
                path: source.to_string(),
                line: lineno,
                msg,
            };
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| err(format!("not a number: {t:?}"))))
                .collect::<Result<_, _>>()?;
            let has_scale = match vals.len() {
                8 => false,
                9 => true,
                n => return Err(err(format!("expected 8 or 9 fields, got {n}"))),
            };
            if *with_scale.get_or_insert(has_scale) != has_scale {
                return Err(err("mixed SE(3) and Sim(3) rows".into()));
            }
            let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
            let norm = q.norm();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(err("zero quaternion".into()));
            }
            let rotation = if (norm - 1.0).abs() > 1e-12 {
                UnitQuaternion::new_normalize(q)
            } else {
                UnitQuaternion::new_unchecked(q)
            };
            let scale = if has_scale { vals[8] } else { 1.0 };
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(err(format!("scale must be positive, got {scale}")));
            }
            entries.push(TrajectoryEntry {
                timestamp: vals[0],
                pose: Sim3Pose::new(rotation, Vector3::new(vals[1], vals[2], vals[3]), scale),
                id: entries.len() as u32,
            });
        }
        Self::new(entries, with_scale.unwrap_or(false))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse_tum(&text, &path.display().to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        std::fs::write(path, self.to_tum_string())?;
        Ok(())
    }
}

/// Closed-form least-squares alignment with `dst ~= s R src + t`.
///
/// With `with_scale = false` the scale is fixed to 1.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> Result<Sim3Pose, EvalError> {
    if src.len() != dst.len() {
        return Err(EvalError::LengthMismatch(src.len(), dst.len()));
    }
    let n = src.len();
    if n < 3 {
        return Err(EvalError::DegenerateConfiguration);
    }
    let inv_n = 1.0 / n as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() * inv_n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() * inv_n;
    let mut cov = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let a = s - mu_s;
        let b = d - mu_d;
        cov += b * a.transpose();
        scatter += a * a.transpose();
        var_s += a.norm_squared();
    }
    cov *= inv_n;
    var_s *= inv_n;

    // collinear or coincident sources leave the rotation about the line undetermined
    let sv = scatter.symmetric_eigenvalues();
    let mut ev: Vec<f64> = sv.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(EvalError::DegenerateConfiguration);
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        // reflection guard: flip the smallest singular direction
        let (imin, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &x)| if x < acc.1 { (i, x) } else { acc });
        d[imin] = -1.0;
    }
    let r = u * Matrix3::from_diagonal(&d) * v_t;
    let scale = if with_scale {
        svd.singular_values.dot(&d) / var_s
    } else {
        1.0
    };
    if !(scale > 0.0) {
        return Err(EvalError::DegenerateConfiguration);
    }
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let t = mu_d - scale * (rotation * mu_s);
    Ok(Sim3Pose::new(rotation, t, scale))
}

/// Pairs of indices `(estimate, groundtruth)` matched by nearest timestamp.
pub fn associate(est: &Trajectory, gt: &Trajectory, max_dt: f64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    if gt.is_empty() {
        return pairs;
    }
    let mut j = 0usize;
    for (i, e) in est.entries.iter().enumerate() {
        while j + 1 < gt.len() && gt.entries[j + 1].timestamp <= e.timestamp {
            j += 1;
        }
        let mut best = j;
        if j + 1 < gt.len()
            && (gt.entries[j + 1].timestamp - e.timestamp).abs() < (gt.entries[j].timestamp - e.timestamp).abs()
        {
            best = j + 1;
        }
        if (gt.entries[best].timestamp - e.timestamp).abs() <= max_dt {
            pairs.push((i, best));
        }
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    SE3,
    Sim3,
}

impl std::str::FromStr for Alignment {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "se3" => Ok(Alignment::SE3),
            "sim3" => Ok(Alignment::Sim3),
            other => Err(format!("unknown alignment {other:?} (expected se3 or sim3)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AteResult {
    pub rmse: f64,
    /// Maps estimate positions onto ground truth.
    pub alignment: Sim3Pose,
    pub pairs: usize,
}

pub fn ate(est: &Trajectory, gt: &Trajectory, alignment: Alignment) -> Result<AteResult, EvalError> {
    let pairs = associate(est, gt, ASSOCIATION_WINDOW);
    if pairs.len() < 3 {
        return Err(EvalError::NoAssociations(pairs.len()));
    }
    let src: Vec<_> = pairs.iter().map(|&(i, _)| est.entries[i].position()).collect();
    let dst: Vec<_> = pairs.iter().map(|&(_, j)| gt.entries[j].position()).collect();
    let s = umeyama(&src, &dst, alignment == Alignment::Sim3)?;
    let sq: f64 = src.iter().zip(&dst).map(|(a, b)| (s.act(a) - b).norm_squared()).sum();
    Ok(AteResult {
        rmse: (sq / src.len() as f64).sqrt(),
        alignment: s,
        pairs: src.len(),
    })
}

pub fn ate_rmse(est: &Trajectory, gt: &Trajectory, alignment: Alignment) -> Result<f64, EvalError> {
    ate(est, gt, alignment).map(|r| r.rmse)
}

/// Accumulated drift between the start and end of a sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftReport {
    /// RMSE between start-aligned and end-aligned positions, metres.
    pub e_align: f64,
    /// Translation of the drift transform, metres.
    pub e_t: f64,
    /// Rotation angle of the drift transform, degrees.
    pub e_r: f64,
    /// `max(s, 1/s)` of the drift transform.
    pub e_s: f64,
}

fn align_to_segment(traj: &Trajectory, segment: &Trajectory) -> Result<Sim3Pose, EvalError> {
    let pairs = associate(traj, segment, ASSOCIATION_WINDOW);
    if pairs.len() < 3 {
        return Err(EvalError::NoAssociations(pairs.len()));
    }
    let src: Vec<_> = pairs.iter().map(|&(i, _)| traj.entries[i].position()).collect();
    let dst: Vec<_> = pairs.iter().map(|&(_, j)| segment.entries[j].position()).collect();
    umeyama(&src, &dst, true)
}

/// Aligns the trajectory separately to a ground-truth start segment and end
/// segment; the discrepancy between the two alignments is the drift.
pub fn tum_mono_drift(traj: &Trajectory, gt_start: &Trajectory, gt_end: &Trajectory) -> Result<DriftReport, EvalError> {
    let s_start = align_to_segment(traj, gt_start)?;
    let s_end = align_to_segment(traj, gt_end)?;
    let drift = s_start.inverse().compose(&s_end);
    let sq: f64 = traj
        .entries
        .iter()
        .map(|e| (s_start.act(&e.position()) - s_end.act(&e.position())).norm_squared())
        .sum();
    let e_align = if traj.is_empty() {
        0.0
    } else {
        (sq / traj.len() as f64).sqrt()
    };
    Ok(DriftReport {
        e_align,
        e_t: drift.translation.norm(),
        e_r: drift.rotation_angle().to_degrees(),
        e_s: drift.scale.max(1.0 / drift.scale),
    })
}
