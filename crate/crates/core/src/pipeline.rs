//! End-to-end loop closing over a keyframe bundle.
//!
//! An ingestion stage selects points, describes corners and computes BoW
//! vectors; a backend stage maintains the keyframe database, the active
//! window and the pose graph, detects loops and optimizes the graph after
//! every accepted loop. The two stages run on separate threads connected by a
//! channel, or sequentially; both produce identical results.

use crate::bow::{BowError, BowVocabulary, KeyframeDatabase, KeyframeId, QueryResult};
use crate::camera::CameraIntrinsics;
use crate::config::PipelineConfig;
use crate::eval::{ate, tum_mono_drift, Alignment, EvalError, Trajectory, TrajectoryEntry};
use crate::keyframe::{build_keyframe, extract_corners, DepthMap, Keyframe};
use crate::liegroup::Sim3Pose;
use crate::loopclosure::{detect_loops, query_candidates, LoopConstraint, LoopError};
use crate::pixelselect::SelectError;
use crate::posegraph::io::save_graph;
use crate::posegraph::{EdgeWeights, GraphError, OptimizeReport, PoseGraph};
use crate::sim::{Bundle, Observation};
use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("bundle has {odom} odometry poses but {images} images and {obs} observation files")]
    InconsistentBundle { odom: usize, images: usize, obs: usize },
    #[error("keyframe {id}: image is {got_w}x{got_h}, calibration expects {w}x{h}")]
    ImageSize { id: usize, got_w: u32, got_h: u32, w: u32, h: u32 },
    #[error("keyframe {id}: {source}")]
    Select {
        id: usize,
        #[source]
        source: SelectError,
    },
    #[error(transparent)]
    Bow(#[from] BowError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("worker thread panicked")]
    Worker,
}

/// One loop attempt that did not yield a constraint.
#[derive(Debug)]
pub struct LoopFailure {
    pub id_ref: KeyframeId,
    pub id_cur: KeyframeId,
    pub error: LoopError,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timings {
    pub vocabulary: Duration,
    /// Point selection per keyframe.
    pub select: Vec<Duration>,
    /// Loop detection (candidates, matching, PnP, Sim(3)) per keyframe.
    pub detect: Vec<Duration>,
    pub optimize: Vec<Duration>,
    pub total: Duration,
}

fn mean_ms(v: &[Duration]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().map(|d| d.as_secs_f64()).sum::<f64>() * 1e3 / v.len() as f64
    }
}

#[derive(Debug)]
pub struct PipelineResult {
    /// Odometry, camera-to-world.
    pub before: Trajectory,
    /// Optimized poses, camera-to-world with scale.
    pub after: Trajectory,
    /// Every computed constraint, accepted or not, in detection order.
    pub constraints: Vec<LoopConstraint>,
    pub failures: Vec<LoopFailure>,
    pub graph: PoseGraph,
    pub optimizations: Vec<OptimizeReport>,
    /// Best BoW candidate of each keyframe, if any.
    pub top_candidates: Vec<Option<QueryResult>>,
    pub mean_corners: f64,
    pub mean_points: f64,
    pub timings: Timings,
}

impl PipelineResult {
    pub fn accepted(&self) -> impl Iterator<Item = &LoopConstraint> {
        self.constraints.iter().filter(|c| c.accepted)
    }
}

fn depth_map(k: &CameraIntrinsics, obs: &[Observation]) -> DepthMap {
    DepthMap::new(k.width, k.height, obs.iter().map(|o| (o.pixel, o.inv_depth)))
}

fn check_bundle(b: &Bundle) -> Result<(), PipelineError> {
    let n = b.odom.len();
    if b.images.len() != n || b.observations.len() != n {
        return Err(PipelineError::InconsistentBundle {
            odom: n,
            images: b.images.len(),
            obs: b.observations.len(),
        });
    }
    for (id, img) in b.images.iter().enumerate() {
        if img.width() != b.calib.width || img.height() != b.calib.height {
            return Err(PipelineError::ImageSize {
                id,
                got_w: img.width(),
                got_h: img.height(),
                w: b.calib.width,
                h: b.calib.height,
            });
        }
    }
    Ok(())
}

/// Trains a vocabulary on every `bow_train_stride`-th keyframe of the bundle.
pub fn train_vocabulary(bundle: &Bundle, cfg: &PipelineConfig) -> Result<BowVocabulary, PipelineError> {
    check_bundle(bundle)?;
    let mut training = Vec::new();
    for i in (0..bundle.images.len()).step_by(cfg.bow_train_stride) {
        let (_, corners) = extract_corners(&bundle.images[i], &cfg.select, &DepthMap::default(), cfg.depth_radius)
            .map_err(|source| PipelineError::Select { id: i, source })?;
        training.push(corners.iter().map(|c| c.descriptor.bits).collect());
    }
    Ok(BowVocabulary::build(&training, cfg.bow_k, cfg.bow_depth, cfg.seed)?)
}

struct Ingested {
    keyframe: Arc<Keyframe>,
    select_time: Duration,
}

fn ingest(bundle: &Bundle, i: usize, vocab: &BowVocabulary, cfg: &PipelineConfig) -> Result<Ingested, PipelineError> {
    let depth = depth_map(&bundle.calib, &bundle.observations[i]);
    let t0 = Instant::now();
    let (points, corners) = extract_corners(&bundle.images[i], &cfg.select, &depth, cfg.depth_radius)
        .map_err(|source| PipelineError::Select { id: i, source })?;
    let select_time = t0.elapsed();
    let entry = &bundle.odom.entries[i];
    let keyframe = build_keyframe(i as KeyframeId, entry.timestamp, entry.pose.inverse(), points, corners, vocab);
    Ok(Ingested {
        keyframe: Arc::new(keyframe),
        select_time,
    })
}

struct Backend<'a> {
    cfg: &'a PipelineConfig,
    calib: CameraIntrinsics,
    optimize: bool,
    db: KeyframeDatabase,
    keyframes: BTreeMap<KeyframeId, Arc<Keyframe>>,
    window: VecDeque<KeyframeId>,
    graph: PoseGraph,
    constraints: Vec<LoopConstraint>,
    failures: Vec<LoopFailure>,
    optimizations: Vec<OptimizeReport>,
    top_candidates: Vec<Option<QueryResult>>,
    select_times: Vec<Duration>,
    detect_times: Vec<Duration>,
    optimize_times: Vec<Duration>,
    corners: usize,
    points: usize,
}

impl<'a> Backend<'a> {
    fn new(cfg: &'a PipelineConfig, calib: CameraIntrinsics, optimize: bool) -> Self {
        Self {
            cfg,
            calib,
            optimize,
            db: KeyframeDatabase::new(),
            keyframes: BTreeMap::new(),
            window: VecDeque::new(),
            graph: PoseGraph::new(),
            constraints: Vec::new(),
            failures: Vec::new(),
            optimizations: Vec::new(),
            top_candidates: Vec::new(),
            select_times: Vec::new(),
            detect_times: Vec::new(),
            optimize_times: Vec::new(),
            corners: 0,
            points: 0,
        }
    }

    fn process(&mut self, item: Ingested) -> Result<(), PipelineError> {
        let kf = item.keyframe;
        let id = kf.id;
        self.select_times.push(item.select_time);
        self.corners += kf.corners.len();
        self.points += kf.points.len();

        self.graph.add_node(id, kf.pose);
        self.db.insert(id, kf.bow.clone());
        self.keyframes.insert(id, Arc::clone(&kf));
        self.window.push_back(id);
        if self.window.len() > self.cfg.window_size {
            let m = self.window.pop_front().expect("window is non-empty");
            let rest: Vec<KeyframeId> = self.window.iter().copied().collect();
            self.graph
                .add_covisibility_edges(m, &rest, self.cfg.covis_consecutive_only, self.cfg.covis_weights)?;
            self.db.set_marginalized(m);
        }

        let t0 = Instant::now();
        self.top_candidates
            .push(query_candidates(&kf, &self.db, &self.cfg.loop_cfg).first().copied());
        let results = detect_loops(&kf, &self.db, &self.keyframes, &self.calib, &self.cfg.loop_cfg);
        self.detect_times.push(t0.elapsed());
        let mut any = false;
        for r in results {
            match r {
                Ok(c) => {
                    if c.accepted {
                        let w = EdgeWeights::for_loop(self.cfg.covis_weights, c.inliers, self.cfg.loop_full_support);
                        any |= self.graph.add_loop_edge(c.id_ref, c.id_cur, c.s_cr, w)?;
                    }
                    self.constraints.push(c);
                }
                Err((id_ref, error)) => self.failures.push(LoopFailure {
                    id_ref,
                    id_cur: id,
                    error,
                }),
            }
        }
        if any && self.optimize {
            self.graph.set_window(self.window.iter().copied());
            self.graph.set_fixed(id)?;
            let t0 = Instant::now();
            let report = self.graph.optimize(&self.cfg.pgo)?;
            self.optimize_times.push(t0.elapsed());
            self.optimizations.push(report);
        }
        Ok(())
    }
}

fn graph_trajectory(graph: &PoseGraph, odom: &Trajectory) -> Result<Trajectory, EvalError> {
    let entries = odom
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| TrajectoryEntry {
            timestamp: e.timestamp,
            pose: graph
                .node(i as KeyframeId)
                .map(|n| n.estimate.inverse())
                .unwrap_or(e.pose),
            id: e.id,
        })
        .collect();
    Trajectory::new(entries, true)
}

/// Runs loop detection over the bundle and, unless `detect_only`, optimizes
/// the pose graph after each accepted loop. Without a vocabulary one is
/// trained from the bundle.
pub fn run_pipeline(
    bundle: &Bundle,
    vocab: Option<&BowVocabulary>,
    cfg: &PipelineConfig,
    detect_only: bool,
) -> Result<PipelineResult, PipelineError> {
    let start = Instant::now();
    check_bundle(bundle)?;
    let trained;
    let vocab = match vocab {
        Some(v) => v,
        None => {
            trained = train_vocabulary(bundle, cfg)?;
            &trained
        }
    };
    let vocab_time = start.elapsed();
    let n = bundle.odom.len();
    let mut backend = Backend::new(cfg, bundle.calib, !detect_only);

    if cfg.single_thread {
        for i in 0..n {
            backend.process(ingest(bundle, i, vocab, cfg)?)?;
        }
    } else {
        std::thread::scope(|s| -> Result<(), PipelineError> {
            let (tx, rx) = mpsc::sync_channel::<Result<Ingested, PipelineError>>(4);
            let producer = s.spawn(move || {
                for i in 0..n {
                    let item = ingest(bundle, i, vocab, cfg);
                    let stop = item.is_err();
                    if tx.send(item).is_err() || stop {
                        break;
                    }
                }
            });
            let mut outcome = Ok(());
            for item in rx.iter() {
                if let Err(e) = item.and_then(|it| backend.process(it)) {
                    outcome = Err(e);
                    break;
                }
            }
            // dropping the receiver unblocks the producer on early exit
            drop(rx);
            producer.join().map_err(|_| PipelineError::Worker)?;
            outcome
        })?;
    }

    let after = graph_trajectory(&backend.graph, &bundle.odom)?;
    let b = backend;
    Ok(PipelineResult {
        before: bundle.odom.clone(),
        after,
        constraints: b.constraints,
        failures: b.failures,
        graph: b.graph,
        optimizations: b.optimizations,
        top_candidates: b.top_candidates,
        mean_corners: b.corners as f64 / n.max(1) as f64,
        mean_points: b.points as f64 / n.max(1) as f64,
        timings: Timings {
            vocabulary: vocab_time,
            select: b.select_times,
            detect: b.detect_times,
            optimize: b.optimize_times,
            total: start.elapsed(),
        },
    })
}

/// Accuracy figures against ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub ate_before: f64,
    pub ate_after: f64,
}

impl Accuracy {
    pub fn ratio(&self) -> f64 {
        self.ate_after / self.ate_before
    }
}

pub fn accuracy(result: &PipelineResult, gt: &Trajectory) -> Result<Accuracy, EvalError> {
    Ok(Accuracy {
        ate_before: ate(&result.before, gt, Alignment::Sim3)?.rmse,
        ate_after: ate(&result.after, gt, Alignment::Sim3)?.rmse,
    })
}

pub const LOOPS_HEADER: &str = "id_ref,id_cur,tx,ty,tz,qx,qy,qz,qw,s,inliers";

pub fn loops_to_csv<'a>(loops: impl IntoIterator<Item = &'a LoopConstraint>) -> String {
    let mut s = String::from(LOOPS_HEADER);
    s.push('\n');
    for c in loops {
        let t = &c.s_cr.translation;
        let q = c.s_cr.rotation.quaternion();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            c.id_ref, c.id_cur, t.x, t.y, t.z, q.i, q.j, q.k, q.w, c.s_cr.scale, c.inliers
        );
    }
    s
}

/// Deterministic metrics first, then wall-clock timings.
pub fn report_text(result: &PipelineResult, gt: Option<&Trajectory>) -> Result<String, EvalError> {
    let mut s = String::new();
    let accepted = result.accepted().count();
    let _ = writeln!(s, "keyframes = {}", result.before.len());
    let _ = writeln!(s, "mean_points = {:.1}", result.mean_points);
    let _ = writeln!(s, "mean_corners = {:.1}", result.mean_corners);
    let _ = writeln!(s, "loop_constraints = {}", result.constraints.len());
    let _ = writeln!(s, "loops_accepted = {accepted}");
    let _ = writeln!(s, "loop_failures = {}", result.failures.len());
    let _ = writeln!(s, "optimizations = {}", result.optimizations.len());
    if let Some(last) = result.optimizations.last() {
        let _ = writeln!(s, "final_chi2 = {:.6e}", last.final_chi2);
    }
    if let Some(gt) = gt {
        let a = accuracy(result, gt)?;
        let _ = writeln!(s, "ate_before = {:.6}", a.ate_before);
        let _ = writeln!(s, "ate_after = {:.6}", a.ate_after);
        let _ = writeln!(s, "ate_ratio = {:.6}", a.ratio());
        if let Some(d) = drift_of(&result.after, gt) {
            let _ = writeln!(s, "drift_after_t = {:.6}", d.e_t);
            let _ = writeln!(s, "drift_after_r_deg = {:.6}", d.e_r);
            let _ = writeln!(s, "drift_after_s = {:.6}", d.e_s);
        }
    }
    let t = &result.timings;
    let _ = writeln!(s, "\n[timings]");
    let _ = writeln!(s, "vocabulary_ms = {:.3}", t.vocabulary.as_secs_f64() * 1e3);
    let _ = writeln!(s, "select_mean_ms = {:.3}", mean_ms(&t.select));
    let _ = writeln!(s, "detect_mean_ms = {:.3}", mean_ms(&t.detect));
    let _ = writeln!(s, "optimize_mean_ms = {:.3}", mean_ms(&t.optimize));
    let _ = writeln!(s, "total_ms = {:.3}", t.total.as_secs_f64() * 1e3);
    Ok(s)
}

/// Drift between the first and last tenth of the sequence, if both hold at
/// least three poses.
pub fn drift_of(traj: &Trajectory, gt: &Trajectory) -> Option<crate::eval::DriftReport> {
    let n = gt.len();
    let seg = (n / 10).max(3);
    if n < 2 * seg {
        return None;
    }
    let t = |i: usize| gt.entries[i].timestamp;
    let start = gt.segment(t(0), t(seg - 1));
    let end = gt.segment(t(n - seg), t(n - 1));
    tum_mono_drift(traj, &start, &end).ok()
}

/// Top-down (x, y) plot of ground truth, odometry and optimized trajectory,
/// the latter two Sim(3)-aligned to ground truth when it is available.
pub fn trajectory_svg(result: &PipelineResult, gt: Option<&Trajectory>) -> String {
    let align = |t: &Trajectory| -> Vec<(f64, f64)> {
        let s = gt
            .and_then(|g| ate(t, g, Alignment::Sim3).ok())
            .map(|a| a.alignment)
            .unwrap_or_else(Sim3Pose::identity);
        t.positions().iter().map(|p| s.act(p)).map(|p| (p.x, p.y)).collect()
    };
    let mut series: Vec<(&str, Vec<(f64, f64)>)> = Vec::new();
    if let Some(g) = gt {
        series.push(("#000000", g.positions().iter().map(|p| (p.x, p.y)).collect()));
    }
    series.push(("#d62728", align(&result.before)));
    series.push(("#1f77b4", align(&result.after)));

    let all = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let size = 600.0;
    let span = (x1 - x0).max(y1 - y0).max(1e-9);
    let map = |(x, y): (f64, f64)| (20.0 + (x - x0) / span * (size - 40.0), size - 20.0 - (y - y0) / span * (size - 40.0));
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\">\n");
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for (color, pts) in &series {
        let d: Vec<String> = pts
            .iter()
            .map(|&p| {
                let (u, v) = map(p);
                format!("{u:.2},{v:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            d.join(" ")
        );
    }
    s.push_str("<text x=\"10\" y=\"15\" font-size=\"12\">black: ground truth, red: odometry, blue: optimized</text>\n");
    s.push_str("</svg>\n");
    s
}

/// Writes before.tum, after.tum, loops.csv, graph.txt, report.txt and
/// trajectory.svg into `dir`.
pub fn write_outputs(dir: impl AsRef<Path>, result: &PipelineResult, gt: Option<&Trajectory>) -> Result<String, PipelineError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    result.before.save(dir.join("before.tum"))?;
    result.after.save(dir.join("after.tum"))?;
    std::fs::write(dir.join("loops.csv"), loops_to_csv(result.accepted()))?;
    save_graph(&result.graph, dir.join("graph.txt")).map_err(|e| match e {
        crate::posegraph::io::GraphIoError::Io(e) => PipelineError::Io(e),
        other => PipelineError::Io(std::io::Error::other(other.to_string())),
    })?;
    let report = report_text(result, gt)?;
    std::fs::write(dir.join("report.txt"), &report)?;
    std::fs::write(dir.join("trajectory.svg"), trajectory_svg(result, gt))?;
    Ok(report)
}
