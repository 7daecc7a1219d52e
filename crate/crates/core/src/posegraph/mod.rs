//! Sim(3) pose graph over keyframes.
//!
//! Node estimates are world-to-camera similarities `T_i`. An edge `(i, j)`
//! measures `S_ij ~= T_i T_j^-1` (camera j to camera i) and contributes the
//! residual `r = log(S_ij T_j T_i^-1)`, which is the camera-to-world form
//! `log(S_ij S_j^-1 S_i)` with `S = T^-1`. A loop constraint `S_cr` is the edge
//! `(cur, ref)`.

pub mod io;
pub mod sparse;

use crate::bow::KeyframeId;
use crate::liegroup::{sim3_left_jacobian_inverse, LieError, Matrix7, Sim3Pose, Sim3Tangent, Vector7};
use nalgebra::{DMatrix, DVector};
use sparse::BlockSparse;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown node {0}")]
    UnknownNode(KeyframeId),
    #[error("edge connects node {0} to itself")]
    SelfLoop(KeyframeId),
    #[error("node {0} is not connected to any fixed or in-window node")]
    NotConnected(KeyframeId),
    #[error("linear solver failed: {0}")]
    SolverFailure(String),
    #[error(transparent)]
    Lie(#[from] LieError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeKind {
    Covisibility,
    Loop,
}

impl EdgeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EdgeKind::Covisibility => "COVIS",
            EdgeKind::Loop => "LOOP",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "COVIS" => Some(EdgeKind::Covisibility),
            "LOOP" => Some(EdgeKind::Loop),
            _ => None,
        }
    }
}

/// Diagonal information: translation, rotation and log-scale weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeWeights {
    pub w_t: f64,
    pub w_r: f64,
    pub w_s: f64,
}

impl EdgeWeights {
    pub const COVISIBILITY: EdgeWeights = EdgeWeights {
        w_t: 1e4,
        w_r: 1e6,
        w_s: 1e6,
    };

    /// Loop weights: `base` scaled by inlier support, capped at `base`.
    pub fn for_loop(base: EdgeWeights, inliers: usize, full_support: usize) -> Self {
        let f = (inliers as f64 / full_support.max(1) as f64).min(1.0);
        let c = base;
        Self {
            w_t: c.w_t * f,
            w_r: c.w_r * f,
            w_s: c.w_s * f,
        }
    }

    pub fn diagonal(&self) -> Vector7 {
        Vector7::from_column_slice(&[self.w_t, self.w_t, self.w_t, self.w_r, self.w_r, self.w_r, self.w_s])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseNode {
    pub id: KeyframeId,
    /// World-to-camera.
    pub estimate: Sim3Pose,
    pub fixed: bool,
    pub in_window: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEdge {
    pub id_i: KeyframeId,
    pub id_j: KeyframeId,
    pub measurement: Sim3Pose,
    pub weights: EdgeWeights,
    pub kind: EdgeKind,
}

impl PoseEdge {
    fn key(&self) -> (KeyframeId, KeyframeId, EdgeKind) {
        (self.id_i.min(self.id_j), self.id_i.max(self.id_j), self.kind)
    }
}

/// Residual `log(S_ij T_j T_i^-1)`.
pub fn edge_residual(measurement: &Sim3Pose, t_i: &Sim3Pose, t_j: &Sim3Pose) -> Result<Vector7, LieError> {
    Ok(measurement.compose(t_j).compose(&t_i.inverse()).log()?.to_vector())
}

/// Residual and its Jacobians with respect to left updates `T <- exp(d) T`
/// of node i and node j.
pub fn edge_linearization(
    measurement: &Sim3Pose,
    t_i: &Sim3Pose,
    t_j: &Sim3Pose,
) -> Result<(Vector7, Matrix7, Matrix7), LieError> {
    let e = measurement.compose(t_j).compose(&t_i.inverse());
    let r = e.log()?;
    let jinv = sim3_left_jacobian_inverse(&r);
    let jj = jinv * measurement.adjoint();
    let ji = -jinv * e.adjoint();
    Ok((r.to_vector(), ji, jj))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearSolver {
    SparseCholesky,
    /// Dense Cholesky, for cross-checking small graphs.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeConfig {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    /// Stop once the relative chi2 decrease falls below this.
    pub relative_tolerance: f64,
    /// Stop once chi2 falls below this.
    pub absolute_tolerance: f64,
    pub solver: LinearSolver,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            initial_lambda: 1e-6,
            relative_tolerance: 1e-9,
            absolute_tolerance: 1e-24,
            solver: LinearSolver::SparseCholesky,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    pub initial_chi2: f64,
    pub final_chi2: f64,
    pub iterations: usize,
    /// chi2 after each accepted step, starting with the initial value.
    pub chi2_history: Vec<f64>,
    pub free_nodes: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoseGraph {
    nodes: BTreeMap<KeyframeId, PoseNode>,
    edges: Vec<PoseEdge>,
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &PoseNode> {
        self.nodes.values()
    }

    pub fn node(&self, id: KeyframeId) -> Option<&PoseNode> {
        self.nodes.get(&id)
    }

    pub fn node_mut(&mut self, id: KeyframeId) -> Option<&mut PoseNode> {
        self.nodes.get_mut(&id)
    }

    pub fn edges(&self) -> &[PoseEdge] {
        &self.edges
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Inserts or replaces a node.
    pub fn add_node(&mut self, id: KeyframeId, estimate: Sim3Pose) {
        self.nodes.insert(
            id,
            PoseNode {
                id,
                estimate,
                fixed: false,
                in_window: false,
            },
        );
    }

    pub fn insert_node(&mut self, node: PoseNode) {
        self.nodes.insert(node.id, node);
    }

    /// Marks exactly one node as fixed.
    pub fn set_fixed(&mut self, id: KeyframeId) -> Result<(), GraphError> {
        if !self.nodes.contains_key(&id) {
            return Err(GraphError::UnknownNode(id));
        }
        for n in self.nodes.values_mut() {
            n.fixed = n.id == id;
        }
        Ok(())
    }

    pub fn set_window<I: IntoIterator<Item = KeyframeId>>(&mut self, ids: I) {
        let set: BTreeSet<KeyframeId> = ids.into_iter().collect();
        for n in self.nodes.values_mut() {
            n.in_window = set.contains(&n.id);
        }
    }

    /// Adds an edge; returns false if an edge of the same kind already joins
    /// the pair.
    pub fn add_edge(&mut self, edge: PoseEdge) -> Result<bool, GraphError> {
        for id in [edge.id_i, edge.id_j] {
            if !self.nodes.contains_key(&id) {
                return Err(GraphError::UnknownNode(id));
            }
        }
        if edge.id_i == edge.id_j {
            return Err(GraphError::SelfLoop(edge.id_i));
        }
        if self.edges.iter().any(|e| e.key() == edge.key()) {
            return Ok(false);
        }
        self.edges.push(edge);
        Ok(true)
    }

    /// Covisibility edges measured from the current estimates: from `id` to
    /// every node of `others`, or only to its successor in id order when
    /// `consecutive_only` is set. Returns the number of edges added.
    pub fn add_covisibility_edges(
        &mut self,
        id: KeyframeId,
        others: &[KeyframeId],
        consecutive_only: bool,
        weights: EdgeWeights,
    ) -> Result<usize, GraphError> {
        let mut targets: Vec<KeyframeId> = others.iter().copied().filter(|&o| o != id).collect();
        targets.sort_unstable();
        if consecutive_only {
            targets = targets.into_iter().filter(|&o| o > id).take(1).collect();
        }
        let t_i = self.nodes.get(&id).ok_or(GraphError::UnknownNode(id))?.estimate;
        let mut added = 0;
        for j in targets {
            let t_j = self.nodes.get(&j).ok_or(GraphError::UnknownNode(j))?.estimate;
            let edge = PoseEdge {
                id_i: id,
                id_j: j,
                measurement: t_i.compose(&t_j.inverse()),
                weights,
                kind: EdgeKind::Covisibility,
            };
            if self.add_edge(edge)? {
                added += 1;
            }
        }
        Ok(added)
    }

    /// Loop edge `(cur, ref)` with measurement `s_cr`.
    pub fn add_loop_edge(
        &mut self,
        id_ref: KeyframeId,
        id_cur: KeyframeId,
        s_cr: Sim3Pose,
        weights: EdgeWeights,
    ) -> Result<bool, GraphError> {
        self.add_edge(PoseEdge {
            id_i: id_cur,
            id_j: id_ref,
            measurement: s_cr,
            weights,
            kind: EdgeKind::Loop,
        })
    }

    pub fn residual(&self, edge: &PoseEdge) -> Result<Vector7, GraphError> {
        let t_i = &self.nodes.get(&edge.id_i).ok_or(GraphError::UnknownNode(edge.id_i))?.estimate;
        let t_j = &self.nodes.get(&edge.id_j).ok_or(GraphError::UnknownNode(edge.id_j))?.estimate;
        Ok(edge_residual(&edge.measurement, t_i, t_j)?)
    }

    pub fn chi2(&self) -> Result<f64, GraphError> {
        let mut sum = 0.0;
        for e in &self.edges {
            let r = self.residual(e)?;
            sum += r.component_mul(&e.weights.diagonal()).dot(&r);
        }
        Ok(sum)
    }

    /// Block index of each free node; elimination runs in reverse id order.
    fn free_index(&self) -> BTreeMap<KeyframeId, usize> {
        self.nodes
            .values()
            .rev()
            .filter(|n| !n.fixed && !n.in_window)
            .enumerate()
            .map(|(i, n)| (n.id, i))
            .collect()
    }

    /// Every free node must reach a fixed or in-window node.
    fn check_connected(&self) -> Result<(), GraphError> {
        let mut adj: BTreeMap<KeyframeId, Vec<KeyframeId>> = BTreeMap::new();
        for e in &self.edges {
            adj.entry(e.id_i).or_default().push(e.id_j);
            adj.entry(e.id_j).or_default().push(e.id_i);
        }
        let mut seen: BTreeSet<KeyframeId> = BTreeSet::new();
        let mut queue: VecDeque<KeyframeId> = VecDeque::new();
        for n in self.nodes.values().filter(|n| n.fixed || n.in_window) {
            seen.insert(n.id);
            queue.push_back(n.id);
        }
        while let Some(id) = queue.pop_front() {
            for &nb in adj.get(&id).map(|v| v.as_slice()).unwrap_or(&[]) {
                if seen.insert(nb) {
                    queue.push_back(nb);
                }
            }
        }
        match self.nodes.keys().find(|id| !seen.contains(id)) {
            Some(&id) => Err(GraphError::NotConnected(id)),
            None => Ok(()),
        }
    }

    /// Gauss-Newton system over the free nodes.
    fn build_system(&self, index: &BTreeMap<KeyframeId, usize>) -> Result<(BlockSparse, Vec<Vector7>), GraphError> {
        let mut h = BlockSparse::new(index.len());
        let mut b = vec![Vector7::zeros(); index.len()];
        for e in &self.edges {
            let (fi, fj) = (index.get(&e.id_i).copied(), index.get(&e.id_j).copied());
            if fi.is_none() && fj.is_none() {
                continue;
            }
            let t_i = &self.nodes[&e.id_i].estimate;
            let t_j = &self.nodes[&e.id_j].estimate;
            let (r, ji, jj) = edge_linearization(&e.measurement, t_i, t_j)?;
            let w = Matrix7::from_diagonal(&e.weights.diagonal());
            let wr = w * r;
            if let Some(a) = fi {
                h.add(a, a, &(ji.transpose() * w * ji));
                b[a] += ji.transpose() * wr;
            }
            if let Some(c) = fj {
                h.add(c, c, &(jj.transpose() * w * jj));
                b[c] += jj.transpose() * wr;
            }
            if let (Some(a), Some(c)) = (fi, fj) {
                h.add(c, a, &(jj.transpose() * w * ji));
            }
        }
        Ok((h, b))
    }

    fn solve(h: &BlockSparse, b: &[Vector7], solver: LinearSolver) -> Option<Vec<Vector7>> {
        let rhs: Vec<Vector7> = b.iter().map(|v| -v).collect();
        match solver {
            LinearSolver::SparseCholesky => Some(h.cholesky()?.solve(&rhs)),
            LinearSolver::Dense => {
                let n = rhs.len();
                let bd = DVector::from_iterator(7 * n, rhs.iter().flat_map(|v| v.iter().copied()));
                let hd: DMatrix<f64> = h.to_dense();
                let x = hd.cholesky()?.solve(&bd);
                Some((0..n).map(|i| Vector7::from_fn(|r, _| x[7 * i + r])).collect())
            }
        }
    }

    /// Levenberg-Marquardt over all nodes that are neither fixed nor in the
    /// window; those stay bit-identical.
    pub fn optimize(&mut self, cfg: &OptimizeConfig) -> Result<OptimizeReport, GraphError> {
        self.check_connected()?;
        let index = self.free_index();
        let initial = self.chi2()?;
        let mut report = OptimizeReport {
            initial_chi2: initial,
            final_chi2: initial,
            iterations: 0,
            chi2_history: vec![initial],
            free_nodes: index.len(),
        };
        if index.is_empty() || self.edges.is_empty() {
            return Ok(report);
        }
        let mut chi2 = initial;
        let mut lambda = cfg.initial_lambda;
        while report.iterations < cfg.max_iterations && chi2 > cfg.absolute_tolerance {
            report.iterations += 1;
            let (h, b) = self.build_system(&index)?;
            let mut improved = false;
            for _ in 0..10 {
                let mut damped = h.clone();
                for i in 0..index.len() {
                    let d = damped.diagonal(i).diagonal();
                    let dm = damped.diagonal_mut(i);
                    for r in 0..7 {
                        dm[(r, r)] += lambda * d[r].max(1e-12);
                    }
                }
                let Some(step) = Self::solve(&damped, &b, cfg.solver) else {
                    lambda *= 10.0;
                    continue;
                };
                let backup: Vec<(KeyframeId, Sim3Pose)> =
                    index.keys().map(|id| (*id, self.nodes[id].estimate)).collect();
                for (id, &k) in &index {
                    let n = self.nodes.get_mut(id).expect("indexed node");
                    n.estimate = Sim3Pose::exp(&Sim3Tangent::from_vector(&step[k])).compose(&n.estimate);
                }
                let next = self.chi2().unwrap_or(f64::INFINITY);
                if next < chi2 {
                    let rel = (chi2 - next) / chi2;
                    chi2 = next;
                    report.chi2_history.push(chi2);
                    lambda = (lambda / 3.0).max(1e-12);
                    improved = true;
                    if rel < cfg.relative_tolerance {
                        report.final_chi2 = chi2;
                        return Ok(report);
                    }
                    break;
                }
                for (id, est) in backup {
                    self.nodes.get_mut(&id).expect("indexed node").estimate = est;
                }
                lambda *= 4.0;
            }
            if !improved {
                if !chi2.is_finite() {
                    return Err(GraphError::SolverFailure("non-finite chi2".into()));
                }
                break;
            }
        }
        report.final_chi2 = chi2;
        Ok(report)
    }
}
