//! Synthetic loop sequences: a landmark world, a circular camera path,
//! drift-corrupted odometry, landmark observations and dot-splat renders.
//!
//! Observed inverse depths are expressed in the odometry scale of their
//! keyframe, as a monocular front end would report them.

use crate::camera::CameraIntrinsics;
use crate::eval::{EvalError, Trajectory, TrajectoryEntry};
use crate::image::{GrayImage, ImageError};
use crate::liegroup::{SE3Pose, Sim3Pose, Vector6};
use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator parameters: {0}")]
    InvalidParameters(String),
    #[error("missing bundle file {0}")]
    MissingFile(PathBuf),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub id: u32,
    pub position: Vector3<f64>,
    pub intensity: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub landmarks: Vec<Landmark>,
    pub bounds_min: Vector3<f64>,
    pub bounds_max: Vector3<f64>,
}

impl World {
    /// Landmarks uniform in the box, with base intensities in `[80, 255]`.
    pub fn random(n: usize, bounds_min: Vector3<f64>, bounds_max: Vector3<f64>, seed: u64) -> Result<Self, SimError> {
        Self::clustered(n, 1, 0.0, bounds_min, bounds_max, seed)
    }

    /// Landmarks in clusters of `cluster_size` spread uniformly over a disc of
    /// `cluster_radius` with a random orientation; disc centres are uniform in
    /// the box shrunk by the radius. A cluster reads as one small planar
    /// textured patch, so the neighbourhood of a dot keeps its layout across
    /// viewpoints up to foreshortening.
    pub fn clustered(
        n: usize,
        cluster_size: usize,
        cluster_radius: f64,
        bounds_min: Vector3<f64>,
        bounds_max: Vector3<f64>,
        seed: u64,
    ) -> Result<Self, SimError> {
        if (0..3).any(|i| !(bounds_max[i] - bounds_min[i] > 2.0 * cluster_radius)) {
            return Err(SimError::InvalidParameters("world bounds empty or smaller than a cluster".into()));
        }
        if cluster_size == 0 || !(cluster_radius >= 0.0) {
            return Err(SimError::InvalidParameters("cluster size must be >= 1 and radius >= 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut landmarks = Vec::with_capacity(n);
        let mut centre = Vector3::zeros();
        let mut axes = (Vector3::x(), Vector3::y());
        for i in 0..n {
            if i % cluster_size == 0 {
                centre = Vector3::from_fn(|k, _| {
                    rng.random_range(bounds_min[k] + cluster_radius..bounds_max[k] - cluster_radius)
                });
                let normal: Vector3<f64> = loop {
                    let v = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                    if v.norm_squared() <= 1.0 && v.norm_squared() > 1e-6 {
                        break v.normalize();
                    }
                };
                let helper = if normal.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
                let a = normal.cross(&helper).normalize();
                axes = (a, normal.cross(&a));
            }
            let offset = if cluster_radius > 0.0 {
                let (u, v) = loop {
                    let (u, v): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                    if u * u + v * v <= 1.0 {
                        break (u, v);
                    }
                };
                (axes.0 * u + axes.1 * v) * cluster_radius
            } else {
                Vector3::zeros()
            };
            landmarks.push(Landmark {
                id: i as u32,
                position: centre + offset,
                intensity: rng.random_range(80..=255),
            });
        }
        Ok(Self {
            landmarks,
            bounds_min,
            bounds_max,
        })
    }

    pub fn empty() -> Self {
        Self {
            landmarks: Vec::new(),
            bounds_min: Vector3::repeat(-1.0),
            bounds_max: Vector3::repeat(1.0),
        }
    }
}

/// Per-step odometry noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftModel {
    /// Meters per step.
    pub sigma_t: f64,
    /// Radians per step.
    pub sigma_r: f64,
    /// Log-scale per step.
    pub sigma_s: f64,
    pub seed: u64,
}

impl DriftModel {
    pub fn none() -> Self {
        Self {
            sigma_t: 0.0,
            sigma_r: 0.0,
            sigma_s: 0.0,
            seed: 0,
        }
    }

    fn is_zero(&self) -> bool {
        self.sigma_t == 0.0 && self.sigma_r == 0.0 && self.sigma_s == 0.0
    }
}

impl Default for DriftModel {
    fn default() -> Self {
        Self {
            sigma_t: 0.01,
            sigma_r: 0.001,
            sigma_s: 0.001,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LookDirection {
    Inward,
    Outward,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceParams {
    pub n_keyframes: usize,
    pub radius: f64,
    pub height: f64,
    pub look: LookDirection,
    pub min_depth: f64,
    pub max_depth: f64,
    /// Multiplicative noise on observed depth (standard deviation).
    pub depth_noise: f64,
    /// Seconds between keyframes.
    pub dt: f64,
}

impl Default for SequenceParams {
    fn default() -> Self {
        Self {
            n_keyframes: 200,
            radius: 10.0,
            height: 0.0,
            look: LookDirection::Inward,
            min_depth: 0.5,
            max_depth: 40.0,
            depth_noise: 0.01,
            dt: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub landmark_id: u32,
    pub pixel: Vector2<f64>,
    pub inv_depth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopSequence {
    /// Camera-to-world ground truth.
    pub gt: Trajectory,
    /// Camera-to-world odometry.
    pub odom: Trajectory,
    pub observations: Vec<Vec<Observation>>,
    /// Odometry units per meter at each keyframe.
    pub odom_scale: Vec<f64>,
}

/// Camera-to-world pose on the circle at angle `theta`.
pub fn circle_pose(theta: f64, radius: f64, height: f64, look: LookDirection) -> SE3Pose {
    let c = Vector3::new(radius * theta.cos(), radius * theta.sin(), height);
    let radial = Vector3::new(theta.cos(), theta.sin(), 0.0);
    let z = match look {
        LookDirection::Inward => -radial,
        LookDirection::Outward => radial,
    };
    let y = Vector3::new(0.0, 0.0, -1.0);
    let x = y.cross(&z);
    let r = Matrix3::from_columns(&[x, y, z]);
    SE3Pose::new(UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r)), c)
}

/// Landmarks visible from a camera-to-world pose, with exact inverse depth.
pub fn visible_landmarks(
    world: &World,
    c2w: &SE3Pose,
    k: &CameraIntrinsics,
    min_depth: f64,
    max_depth: f64,
) -> Vec<(Landmark, Vector2<f64>, f64)> {
    let w2c = c2w.inverse();
    world
        .landmarks
        .iter()
        .filter_map(|l| {
            let z = w2c.act(&l.position);
            if z.z < min_depth || z.z > max_depth {
                return None;
            }
            k.project(&z).ok().map(|p| (*l, p, 1.0 / z.z))
        })
        .collect()
}

pub fn generate_loop_sequence(
    world: &World,
    params: &SequenceParams,
    k: &CameraIntrinsics,
    drift: &DriftModel,
) -> Result<LoopSequence, SimError> {
    if params.n_keyframes < 10 {
        return Err(SimError::InvalidParameters(format!(
            "need at least 10 keyframes, got {}",
            params.n_keyframes
        )));
    }
    if !(drift.sigma_t >= 0.0 && drift.sigma_r >= 0.0 && drift.sigma_s >= 0.0) {
        return Err(SimError::InvalidParameters("drift sigmas must be >= 0".into()));
    }
    if !(params.radius > 0.0 && params.min_depth > 0.0 && params.max_depth > params.min_depth) {
        return Err(SimError::InvalidParameters("bad radius or depth range".into()));
    }
    let n = params.n_keyframes;
    let gt_poses: Vec<SE3Pose> = (0..n)
        .map(|i| {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            circle_pose(theta, params.radius, params.height, params.look)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(drift.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut odom_poses = vec![gt_poses[0].to_sim3()];
    let mut scales = vec![1.0];
    for i in 0..n - 1 {
        let rel = gt_poses[i].inverse().compose(&gt_poses[i + 1]);
        let mut eps = Vector6::zeros();
        for a in 0..3 {
            eps[a] = drift.sigma_t * unit.sample(&mut rng);
            eps[a + 3] = drift.sigma_r * unit.sample(&mut rng);
        }
        let delta = drift.sigma_s * unit.sample(&mut rng);
        let lambda = scales[i] * delta.exp();
        let noisy = SE3Pose::exp(&eps).compose(&SE3Pose::new(rel.rotation, rel.translation * lambda));
        odom_poses.push(odom_poses[i].compose(&noisy.to_sim3()));
        scales.push(lambda);
    }
    if drift.is_zero() {
        odom_poses = gt_poses.iter().map(|p| p.to_sim3()).collect();
    }

    let mut obs_rng = ChaCha8Rng::seed_from_u64(drift.seed ^ 0x0b5e_7a71_0000_0001);
    let observations = gt_poses
        .iter()
        .zip(&scales)
        .map(|(p, &lambda)| {
            visible_landmarks(world, p, k, params.min_depth, params.max_depth)
                .into_iter()
                .map(|(l, pixel, inv_depth)| {
                    let noise = (params.depth_noise * unit.sample(&mut obs_rng)).max(-0.5);
                    Observation {
                        landmark_id: l.id,
                        pixel,
                        inv_depth: inv_depth / (lambda * (1.0 + noise)),
                    }
                })
                .collect()
        })
        .collect();

    let entries = |poses: Vec<Sim3Pose>| {
        poses
            .into_iter()
            .enumerate()
            .map(|(i, pose)| TrajectoryEntry {
                timestamp: i as f64 * params.dt,
                pose,
                id: i as u32,
            })
            .collect::<Vec<_>>()
    };
    Ok(LoopSequence {
        gt: Trajectory::new(entries(gt_poses.iter().map(|p| p.to_sim3()).collect()), false)?,
        odom: Trajectory::new(entries(odom_poses), false)?,
        observations,
        odom_scale: scales,
    })
}

/// Horizontal ramp (40 to 80) plus a Gaussian blob (sigma 1.5 px) per visible
/// landmark and additive Gaussian pixel noise.
pub fn render_keyframe(
    world: &World,
    c2w: &SE3Pose,
    k: &CameraIntrinsics,
    noise_sigma: f64,
    seed: u64,
) -> Result<GrayImage, SimError> {
    const BLOB_SIGMA: f64 = 1.5;
    let (w, h) = (k.width as usize, k.height as usize);
    let mut buf: Vec<f64> = (0..w * h)
        .map(|i| 40.0 + 40.0 * (i % w) as f64 / (w.max(2) - 1) as f64)
        .collect();
    let reach = (3.0 * BLOB_SIGMA).ceil() as i64;
    let inv = 1.0 / (2.0 * BLOB_SIGMA * BLOB_SIGMA);
    for (l, p, _) in visible_landmarks(world, c2w, k, 1e-3, f64::INFINITY) {
        let (px, py) = (p.x.round() as i64, p.y.round() as i64);
        // the Gaussian is separable: one exp per row and per column
        let (x0, x1) = ((px - reach).max(0), (px + reach).min(w as i64 - 1));
        let (y0, y1) = ((py - reach).max(0), (py + reach).min(h as i64 - 1));
        let gx: Vec<f64> = (x0..=x1).map(|x| (-(x as f64 - p.x).powi(2) * inv).exp()).collect();
        for y in y0..=y1 {
            let gy = l.intensity as f64 * (-(y as f64 - p.y).powi(2) * inv).exp();
            let row = &mut buf[y as usize * w + x0 as usize..=y as usize * w + x1 as usize];
            for (v, g) in row.iter_mut().zip(&gx) {
                *v += gy * g;
            }
        }
    }
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| SimError::InvalidParameters(e.to_string()))?;
        for v in buf.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    // round half up; the cast truncates the non-negative value
    let pixels = buf.into_iter().map(|v| (v.clamp(0.0, 255.0) + 0.5) as u8).collect();
    Ok(GrayImage::new(k.width, k.height, pixels)?)
}

/// On-disk keyframe bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub calib: CameraIntrinsics,
    pub gt: Option<Trajectory>,
    pub odom: Trajectory,
    pub images: Vec<GrayImage>,
    pub observations: Vec<Vec<Observation>>,
}

pub fn calib_to_string(k: &CameraIntrinsics) -> String {
    format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height)
}

pub fn parse_calib(text: &str, source: &str) -> Result<CameraIntrinsics, SimError> {
    let err = |msg: String| SimError::Parse {
        path: source.to_string(),
        line: 1,
        msg,
    };
    let f: Vec<&str> = text.split_whitespace().collect();
    if f.len() != 6 {
        return Err(err(format!("expected 6 fields, got {}", f.len())));
    }
    let num = |t: &str| t.parse::<f64>().map_err(|_| err(format!("not a number: {t:?}")));
    let int = |t: &str| t.parse::<u32>().map_err(|_| err(format!("not an integer: {t:?}")));
    CameraIntrinsics::new(num(f[0])?, num(f[1])?, num(f[2])?, num(f[3])?, int(f[4])?, int(f[5])?)
        .map_err(|e| err(e.to_string()))
}

pub fn observations_to_string(obs: &[Observation]) -> String {
    let mut s = String::from("landmark_id,u,v,inv_depth\n");
    for o in obs {
        let _ = writeln!(s, "{},{},{},{}", o.landmark_id, o.pixel.x, o.pixel.y, o.inv_depth);
    }
    s
}

pub fn parse_observations(text: &str, source: &str) -> Result<Vec<Observation>, SimError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("landmark_id")) {
            continue;
        }
        let err = |msg: String| SimError::Parse {
            path: source.to_string(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(err(format!("expected 4 fields, got {}", f.len())));
        }
        let num = |t: &str| t.parse::<f64>().map_err(|_| err(format!("not a number: {t:?}")));
        let inv_depth = num(f[3])?;
        if !(inv_depth > 0.0) {
            return Err(err(format!("inverse depth must be positive, got {inv_depth}")));
        }
        out.push(Observation {
            landmark_id: f[0].parse().map_err(|_| err(format!("bad landmark id {:?}", f[0])))?,
            pixel: Vector2::new(num(f[1])?, num(f[2])?),
            inv_depth,
        });
    }
    Ok(out)
}

pub fn frame_stem(i: usize) -> String {
    format!("kf_{i:05}")
}

pub fn write_bundle(dir: impl AsRef<Path>, b: &Bundle) -> Result<(), SimError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("calib.txt"), calib_to_string(&b.calib))?;
    if let Some(gt) = &b.gt {
        gt.save(dir.join("gt.tum"))?;
    }
    b.odom.save(dir.join("odom.tum"))?;
    for (i, img) in b.images.iter().enumerate() {
        img.save_pgm(dir.join(format!("{}.pgm", frame_stem(i))))?;
    }
    for (i, obs) in b.observations.iter().enumerate() {
        std::fs::write(dir.join(format!("{}.obs", frame_stem(i))), observations_to_string(obs))?;
    }
    Ok(())
}

fn require(path: PathBuf) -> Result<PathBuf, SimError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(SimError::MissingFile(path))
    }
}

/// Reads a bundle; `gt.tum` is optional, every keyframe of `odom.tum` needs
/// its image and observation file.
pub fn read_bundle(dir: impl AsRef<Path>) -> Result<Bundle, SimError> {
    let dir = dir.as_ref();
    let calib_path = require(dir.join("calib.txt"))?;
    let calib = parse_calib(&std::fs::read_to_string(&calib_path)?, &calib_path.display().to_string())?;
    let odom = Trajectory::load(require(dir.join("odom.tum"))?)?;
    let gt_path = dir.join("gt.tum");
    let gt = if gt_path.is_file() { Some(Trajectory::load(gt_path)?) } else { None };
    let mut images = Vec::with_capacity(odom.len());
    let mut observations = Vec::with_capacity(odom.len());
    for i in 0..odom.len() {
        images.push(GrayImage::load_pgm(require(dir.join(format!("{}.pgm", frame_stem(i))))?)?);
        let p = require(dir.join(format!("{}.obs", frame_stem(i))))?;
        observations.push(parse_observations(&std::fs::read_to_string(&p)?, &p.display().to_string())?);
    }
    Ok(Bundle {
        calib,
        gt,
        odom,
        images,
        observations,
    })
}

/// Full simulator configuration for one bundle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub n_landmarks: usize,
    /// Landmarks per cluster; 1 places every landmark independently.
    pub cluster_size: usize,
    pub cluster_radius: f64,
    pub bounds_min: Vector3<f64>,
    pub bounds_max: Vector3<f64>,
    pub sequence: SequenceParams,
    pub drift: DriftModel,
    pub image_noise: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_landmarks: 3000,
            cluster_size: 32,
            cluster_radius: 0.4,
            bounds_min: Vector3::new(-15.0, -15.0, -3.0),
            bounds_max: Vector3::new(15.0, 15.0, 3.0),
            sequence: SequenceParams::default(),
            drift: DriftModel::default(),
            image_noise: 2.0,
            seed: 0,
        }
    }
}

/// Generates world, sequence and renders; the world and drift seeds derive
/// from `cfg.seed`.
pub fn simulate(cfg: &SimConfig, k: &CameraIntrinsics) -> Result<(World, LoopSequence, Bundle), SimError> {
    let world = World::clustered(
        cfg.n_landmarks,
        cfg.cluster_size,
        cfg.cluster_radius,
        cfg.bounds_min,
        cfg.bounds_max,
        cfg.seed,
    )?;
    let drift = DriftModel {
        seed: cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1),
        ..cfg.drift
    };
    let seq = generate_loop_sequence(&world, &cfg.sequence, k, &drift)?;
    let images = seq
        .gt
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| render_keyframe(&world, &e.pose.to_se3(), k, cfg.image_noise, cfg.seed ^ ((i as u64 + 1) << 20)))
        .collect::<Result<Vec<_>, _>>()?;
    let bundle = Bundle {
        calib: *k,
        gt: Some(seq.gt.clone()),
        odom: seq.odom.clone(),
        images,
        observations: seq.observations.clone(),
    };
    Ok((world, seq, bundle))
}
