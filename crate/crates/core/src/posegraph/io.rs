//! Text graph format, one record per line:
//!
//! ```text
//! VERTEX_SIM3 id tx ty tz qx qy qz qw s [FIXED]
//! EDGE_SIM3 id_i id_j tx ty tz qx qy qz qw s w_t w_r w_s kind
//! ```
//!
//! Vertices hold world-to-camera estimates; `kind` is `COVIS` or `LOOP`.
//! Lines starting with `#` are comments.

use super::{EdgeKind, EdgeWeights, GraphError, PoseEdge, PoseGraph, PoseNode};
use crate::liegroup::Sim3Pose;
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphIoError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn push_pose(s: &mut String, p: &Sim3Pose) {
    let t = &p.translation;
    let q = p.rotation.quaternion();
    let _ = write!(s, " {} {} {} {} {} {} {} {}", t.x, t.y, t.z, q.i, q.j, q.k, q.w, p.scale);
}

pub fn graph_to_string(g: &PoseGraph) -> String {
    let mut s = String::new();
    for n in g.nodes() {
        let _ = write!(s, "VERTEX_SIM3 {}", n.id);
        push_pose(&mut s, &n.estimate);
        if n.fixed {
            s.push_str(" FIXED");
        }
        s.push('\n');
    }
    for e in g.edges() {
        let _ = write!(s, "EDGE_SIM3 {} {}", e.id_i, e.id_j);
        push_pose(&mut s, &e.measurement);
        let w = &e.weights;
        let _ = writeln!(s, " {} {} {} {}", w.w_t, w.w_r, w.w_s, e.kind.as_str());
    }
    s
}

fn parse_pose(f: &[&str], err: &dyn Fn(String) -> GraphIoError) -> Result<Sim3Pose, GraphIoError> {
    let v: Vec<f64> = f
        .iter()
        .map(|t| t.parse::<f64>().map_err(|_| err(format!("not a number: {t:?}"))))
        .collect::<Result<_, _>>()?;
    let q = Quaternion::new(v[6], v[3], v[4], v[5]);
    let norm = q.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(err("zero quaternion".into()));
    }
    let rotation = if (norm - 1.0).abs() > 1e-12 {
        UnitQuaternion::new_normalize(q)
    } else {
        UnitQuaternion::new_unchecked(q)
    };
    if !(v[7] > 0.0 && v[7].is_finite()) {
        return Err(err(format!("scale must be positive, got {}", v[7])));
    }
    Ok(Sim3Pose::new(rotation, Vector3::new(v[0], v[1], v[2]), v[7]))
}

pub fn parse_graph(text: &str, source: &str) -> Result<PoseGraph, GraphIoError> {
    let mut g = PoseGraph::new();
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| GraphIoError::Parse {
            path: source.to_string(),
            line: lineno + 1,
            msg,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        let id = |t: &str| t.parse::<u32>().map_err(|_| err(format!("bad id {t:?}")));
        match f[0] {
            "VERTEX_SIM3" => {
                let fixed = match f.len() {
                    10 => false,
                    11 if f[10] == "FIXED" => true,
                    _ => return Err(err(format!("VERTEX_SIM3 expects 9 or 10 fields, got {}", f.len() - 1))),
                };
                let vid = id(f[1])?;
                if g.node(vid).is_some() {
                    return Err(err(format!("duplicate vertex {vid}")));
                }
                g.insert_node(PoseNode {
                    id: vid,
                    estimate: parse_pose(&f[2..10], &err)?,
                    fixed,
                    in_window: false,
                });
            }
            "EDGE_SIM3" => {
                if f.len() != 15 {
                    return Err(err(format!("EDGE_SIM3 expects 14 fields, got {}", f.len() - 1)));
                }
                let w: Vec<f64> = f[11..14]
                    .iter()
                    .map(|t| t.parse::<f64>().map_err(|_| err(format!("not a number: {t:?}"))))
                    .collect::<Result<_, _>>()?;
                if w.iter().any(|x| !(*x >= 0.0)) {
                    return Err(err("weights must be non-negative".into()));
                }
                let kind = EdgeKind::parse(f[14]).ok_or_else(|| err(format!("unknown edge kind {:?}", f[14])))?;
                edges.push((
                    lineno + 1,
                    PoseEdge {
                        id_i: id(f[1])?,
                        id_j: id(f[2])?,
                        measurement: parse_pose(&f[3..11], &err)?,
                        weights: EdgeWeights {
                            w_t: w[0],
                            w_r: w[1],
                            w_s: w[2],
                        },
                        kind,
                    },
                ));
            }
            other => return Err(err(format!("unknown record {other:?}"))),
        }
    }
    for (line, e) in edges {
        match g.add_edge(e) {
            Ok(true) => {}
            Ok(false) => {
                return Err(GraphIoError::Parse {
                    path: source.to_string(),
                    line,
                    msg: "duplicate edge".into(),
                })
            }
            Err(e) => {
                return Err(GraphIoError::Parse {
                    path: source.to_string(),
                    line,
                    msg: e.to_string(),
                })
            }
        }
    }
    Ok(g)
}

pub fn save_graph(g: &PoseGraph, path: impl AsRef<Path>) -> Result<(), GraphIoError> {
    std::fs::write(path, graph_to_string(g))?;
    Ok(())
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<PoseGraph, GraphIoError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_graph(&text, &path.display().to_string())
}
