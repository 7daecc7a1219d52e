//! Flat `key = value` pipeline configuration.
//!
//! Blank lines and `#` comments are ignored; unknown keys and malformed values
//! are errors that name the file and line.

use crate::camera::CameraIntrinsics;
use crate::features::MatchConfig;
use crate::loopclosure::{LoopConfig, RansacConfig, VerifyConfig};
use crate::pixelselect::SelectConfig;
use crate::posegraph::{EdgeWeights, OptimizeConfig};
use crate::sim::{DriftModel, LookDirection, SequenceParams, SimConfig};
use nalgebra::Vector3;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub bundle: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub seed: u64,
    pub single_thread: bool,

    /// Intrinsics for simulated bundles; real bundles carry their own `calib.txt`.
    pub camera: CameraIntrinsics,

    pub select: SelectConfig,
    /// Radius for attaching observed depth to a corner, pixels.
    pub depth_radius: f64,

    pub bow_k: u32,
    pub bow_depth: u32,
    /// Every n-th keyframe contributes training descriptors when no vocabulary is given.
    pub bow_train_stride: usize,

    pub loop_cfg: LoopConfig,

    /// Number of most recent keyframes kept in the active window.
    pub window_size: usize,
    /// Covisibility edges only to the next keyframe instead of the whole window.
    pub covis_consecutive_only: bool,
    pub covis_weights: EdgeWeights,
    /// Inlier count at which a loop edge gets the full covisibility weight.
    pub loop_full_support: usize,
    pub pgo: OptimizeConfig,

    pub sim: SimConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            bundle: None,
            output: None,
            vocab: None,
            seed: 0,
            single_thread: false,
            camera: CameraIntrinsics::vga(),
            select: SelectConfig::default(),
            depth_radius: 2.0,
            bow_k: 10,
            bow_depth: 3,
            bow_train_stride: 4,
            loop_cfg: LoopConfig::default(),
            window_size: 7,
            covis_consecutive_only: false,
            covis_weights: EdgeWeights::COVISIBILITY,
            loop_full_support: 20,
            pgo: OptimizeConfig::default(),
            sim: SimConfig::default(),
        }
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected a boolean, got {v:?}")),
    }
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse::<T>().map_err(|_| format!("cannot parse {v:?}"))
}

fn vec3(v: &str) -> Result<Vector3<f64>, String> {
    let parts: Vec<f64> = v
        .split(',')
        .map(|t| num::<f64>(t.trim()))
        .collect::<Result<_, _>>()?;
    if parts.len() != 3 {
        return Err(format!("expected x,y,z, got {v:?}"));
    }
    Ok(Vector3::new(parts[0], parts[1], parts[2]))
}

/// Every accepted key, for help output and error messages.
pub const KEYS: &[&str] = &[
    "bundle",
    "output",
    "vocab",
    "seed",
    "single_thread",
    "camera.fx",
    "camera.fy",
    "camera.cx",
    "camera.cy",
    "camera.width",
    "camera.height",
    "select.budget",
    "select.corner_quota",
    "select.corner_threshold",
    "select.window",
    "select.nms_radius",
    "select.gradient_threshold_add",
    "select.region_size",
    "select.max_passes",
    "select.depth_radius",
    "match.max_distance",
    "match.ratio",
    "bow.k",
    "bow.depth",
    "bow.train_stride",
    "bow.min_score",
    "bow.max_candidates",
    "loop.min_matches",
    "loop.exclude_recent",
    "ransac.threshold_px",
    "ransac.confidence",
    "ransac.max_iterations",
    "ransac.min_inliers",
    "ransac.refine_iterations",
    "verify.min_inliers",
    "verify.max_residual_2d",
    "verify.max_residual_3d_ratio",
    "pgo.window",
    "pgo.covis_consecutive_only",
    "pgo.w_t",
    "pgo.w_r",
    "pgo.w_s",
    "pgo.loop_full_support",
    "pgo.max_iterations",
    "sim.n_landmarks",
    "sim.bounds_min",
    "sim.bounds_max",
    "sim.cluster_size",
    "sim.cluster_radius",
    "sim.n_keyframes",
    "sim.radius",
    "sim.height",
    "sim.look",
    "sim.min_depth",
    "sim.max_depth",
    "sim.depth_noise",
    "sim.image_noise",
    "sim.sigma_t",
    "sim.sigma_r",
    "sim.sigma_s",
];

impl PipelineConfig {
    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let l = &mut self.loop_cfg;
        match key {
            "bundle" => self.bundle = Some(PathBuf::from(v)),
            "output" => self.output = Some(PathBuf::from(v)),
            "vocab" => self.vocab = Some(PathBuf::from(v)),
            "seed" => self.seed = num(v)?,
            "single_thread" => self.single_thread = parse_bool(v)?,
            "camera.fx" => self.camera.fx = num(v)?,
            "camera.fy" => self.camera.fy = num(v)?,
            "camera.cx" => self.camera.cx = num(v)?,
            "camera.cy" => self.camera.cy = num(v)?,
            "camera.width" => self.camera.width = num(v)?,
            "camera.height" => self.camera.height = num(v)?,
            "select.budget" => self.select.budget = num(v)?,
            "select.corner_quota" => self.select.corner_quota = num(v)?,
            "select.corner_threshold" => self.select.corner_threshold = num(v)?,
            "select.window" => self.select.window = num(v)?,
            "select.nms_radius" => self.select.nms_radius = num(v)?,
            "select.gradient_threshold_add" => self.select.gradient_threshold_add = num(v)?,
            "select.region_size" => self.select.region_size = num(v)?,
            "select.max_passes" => self.select.max_passes = num(v)?,
            "select.depth_radius" => self.depth_radius = num(v)?,
            "match.max_distance" => l.matching.max_distance = num(v)?,
            "match.ratio" => l.matching.ratio = num(v)?,
            "bow.k" => self.bow_k = num(v)?,
            "bow.depth" => self.bow_depth = num(v)?,
            "bow.train_stride" => self.bow_train_stride = num(v)?,
            "bow.min_score" => l.min_score = num(v)?,
            "bow.max_candidates" => l.max_candidates = num(v)?,
            "loop.min_matches" => l.min_matches = num(v)?,
            "loop.exclude_recent" => l.exclude_recent = num(v)?,
            "ransac.threshold_px" => l.ransac.threshold_px = num(v)?,
            "ransac.confidence" => l.ransac.confidence = num(v)?,
            "ransac.max_iterations" => l.ransac.max_iterations = num(v)?,
            "ransac.min_inliers" => l.ransac.min_inliers = num(v)?,
            "ransac.refine_iterations" => l.ransac.refine_iterations = num(v)?,
            "verify.min_inliers" => l.verify.min_inliers = num(v)?,
            "verify.max_residual_2d" => l.verify.max_residual_2d = num(v)?,
            "verify.max_residual_3d_ratio" => l.verify.max_residual_3d_ratio = num(v)?,
            "pgo.window" => self.window_size = num(v)?,
            "pgo.covis_consecutive_only" => self.covis_consecutive_only = parse_bool(v)?,
            "pgo.w_t" => self.covis_weights.w_t = num(v)?,
            "pgo.w_r" => self.covis_weights.w_r = num(v)?,
            "pgo.w_s" => self.covis_weights.w_s = num(v)?,
            "pgo.loop_full_support" => self.loop_full_support = num(v)?,
            "pgo.max_iterations" => self.pgo.max_iterations = num(v)?,
            "sim.n_landmarks" => self.sim.n_landmarks = num(v)?,
            "sim.bounds_min" => self.sim.bounds_min = vec3(v)?,
            "sim.bounds_max" => self.sim.bounds_max = vec3(v)?,
            "sim.cluster_size" => self.sim.cluster_size = num(v)?,
            "sim.cluster_radius" => self.sim.cluster_radius = num(v)?,
            "sim.n_keyframes" => self.sim.sequence.n_keyframes = num(v)?,
            "sim.radius" => self.sim.sequence.radius = num(v)?,
            "sim.height" => self.sim.sequence.height = num(v)?,
            "sim.look" => {
                self.sim.sequence.look = match v {
                    "inward" => LookDirection::Inward,
                    "outward" => LookDirection::Outward,
                    _ => return Err(format!("expected inward or outward, got {v:?}")),
                }
            }
            "sim.min_depth" => self.sim.sequence.min_depth = num(v)?,
            "sim.max_depth" => self.sim.sequence.max_depth = num(v)?,
            "sim.depth_noise" => self.sim.sequence.depth_noise = num(v)?,
            "sim.image_noise" => self.sim.image_noise = num(v)?,
            "sim.sigma_t" => self.sim.drift.sigma_t = num(v)?,
            "sim.sigma_r" => self.sim.drift.sigma_r = num(v)?,
            "sim.sigma_s" => self.sim.drift.sigma_s = num(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn parse(text: &str, source: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| ConfigError::Parse {
                path: source.to_string(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            cfg.set(key.trim(), value.trim()).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        let l = &self.loop_cfg;
        if self.window_size < 1 {
            return bad("pgo.window must be at least 1");
        }
        if self.bow_k < 2 || self.bow_depth < 1 {
            return bad("bow.k must be >= 2 and bow.depth >= 1");
        }
        if self.bow_train_stride < 1 {
            return bad("bow.train_stride must be >= 1");
        }
        if !(l.ransac.threshold_px > 0.0) || !(l.ransac.confidence > 0.0 && l.ransac.confidence < 1.0) {
            return bad("ransac.threshold_px must be > 0 and ransac.confidence in (0, 1)");
        }
        if !(self.depth_radius > 0.0 && self.depth_radius <= 8.0) {
            return bad("select.depth_radius must be in (0, 8]");
        }
        let k = &self.camera;
        if let Err(e) = CameraIntrinsics::new(k.fx, k.fy, k.cx, k.cy, k.width, k.height) {
            return Err(ConfigError::Invalid(format!("camera: {e}")));
        }
        let w = &self.covis_weights;
        if !(w.w_t > 0.0 && w.w_r > 0.0 && w.w_s > 0.0) {
            return bad("pgo weights must be positive");
        }
        let d = &self.sim.drift;
        if !(d.sigma_t >= 0.0 && d.sigma_r >= 0.0 && d.sigma_s >= 0.0) {
            return bad("drift sigmas must be >= 0");
        }
        Ok(())
    }

    pub fn match_config(&self) -> MatchConfig {
        self.loop_cfg.matching
    }

    pub fn ransac_config(&self) -> RansacConfig {
        self.loop_cfg.ransac
    }

    pub fn verify_config(&self) -> VerifyConfig {
        self.loop_cfg.verify
    }

    /// Simulator settings with the run seed applied.
    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            seed: self.seed,
            ..self.sim
        }
    }

    pub fn drift_model(&self) -> DriftModel {
        self.sim.drift
    }

    pub fn sequence_params(&self) -> SequenceParams {
        self.sim.sequence
    }
}
