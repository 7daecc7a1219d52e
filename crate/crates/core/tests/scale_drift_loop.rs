//! One exact loop edge removes most of a pure scale drift.

use sim3loop::eval::{ate, Alignment, Trajectory, TrajectoryEntry};
use sim3loop::liegroup::{SE3Pose, Sim3Pose};
use sim3loop::posegraph::{EdgeWeights, OptimizeConfig, PoseGraph};
use sim3loop::sim::{circle_pose, LookDirection};

fn trajectory(poses: &[Sim3Pose], with_scale: bool) -> Trajectory {
    let entries = poses
        .iter()
        .enumerate()
        .map(|(i, p)| TrajectoryEntry {
            timestamp: i as f64,
            pose: *p,
            id: i as u32,
        })
        .collect();
    Trajectory::new(entries, with_scale).unwrap()
}

#[test]
fn scale_drift_to_1_2_is_reduced_by_80_percent() {
    let n = 200;
    let gt: Vec<SE3Pose> = (0..n)
        .map(|i| circle_pose(2.0 * std::f64::consts::PI * i as f64 / n as f64, 10.0, 0.0, LookDirection::Inward))
        .collect();
    // odometry units per meter grow geometrically to 1.2 at the end
    let lambda: Vec<f64> = (0..n).map(|i| 1.2f64.powf(i as f64 / (n - 1) as f64)).collect();
    let mut odom = vec![gt[0].to_sim3()];
    for i in 0..n - 1 {
        let rel = gt[i].inverse().compose(&gt[i + 1]);
        let step = SE3Pose::new(rel.rotation, rel.translation * lambda[i + 1]).to_sim3();
        odom.push(odom[i].compose(&step));
    }

    let mut g = PoseGraph::new();
    for (i, p) in odom.iter().enumerate() {
        g.add_node(i as u32, p.inverse());
    }
    for i in 0..n - 1 {
        let others: Vec<u32> = (i + 1..(i + 7).min(n)).map(|j| j as u32).collect();
        g.add_covisibility_edges(i as u32, &others, false, EdgeWeights::COVISIBILITY).unwrap();
    }
    let (r, c) = (0, n - 1);
    let m = gt[c].inverse().compose(&gt[r]);
    let s_cr = Sim3Pose::new(m.rotation, m.translation * lambda[c], lambda[c] / lambda[r]);
    g.add_loop_edge(r as u32, c as u32, s_cr, EdgeWeights::COVISIBILITY).unwrap();
    g.set_fixed(c as u32).unwrap();
    g.optimize(&OptimizeConfig::default()).unwrap();

    let gt_t = trajectory(&gt.iter().map(|p| p.to_sim3()).collect::<Vec<_>>(), false);
    let before = ate(&trajectory(&odom, false), &gt_t, Alignment::Sim3).unwrap().rmse;
    let after_poses: Vec<Sim3Pose> = (0..n).map(|i| g.node(i as u32).unwrap().estimate.inverse()).collect();
    let after = ate(&trajectory(&after_poses, true), &gt_t, Alignment::Sim3).unwrap().rmse;
    println!("scale drift 1.2: ATE {before:.4} -> {after:.4}");
    assert!(after <= 0.2 * before, "{before} -> {after}");
}
