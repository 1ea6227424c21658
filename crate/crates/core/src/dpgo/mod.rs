//! Pose-graph optimization over multi-robot trajectories.
//!
//! [`distributed`] holds the per-robot block-coordinate solver that only
//! exchanges separator poses; [`central`] is a batch Levenberg-Marquardt
//! reference over the whole graph.

pub mod central;
pub mod distributed;
mod local;

pub use central::{centralized_solve, CentralConfig, CentralResult, DpgoError};
pub use distributed::{
    dpgo_round, solve_distributed, split_fragments, DistributedResult, DpgoAgent, DpgoConfig,
    DpgoParticipant, RoundStatus, SeparatorPoseMsg,
};
pub use local::{local_block_optimize, LocalConfig, LocalOutcome};

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::estimation::LoopClosure;
use crate::geometry::{wrap_angle, Pose2};
use crate::scenario::RobotId;
use crate::trajectory::Trajectory;

/// A graph node: robot plus odometry sample index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeKey {
    pub robot: RobotId,
    pub index: usize,
}

impl NodeKey {
    pub fn new(robot: RobotId, index: usize) -> Self {
        Self { robot, index }
    }
}

impl fmt::Display for NodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.robot, self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub t: f64,
    pub pose: Pose2,
}

/// Relative-pose constraint: `measurement` is the pose of `to` in the frame
/// of `from`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub from: NodeKey,
    pub to: NodeKey,
    pub measurement: Pose2,
    pub information: Matrix3<f64>,
}

/// A loop edge with a stable identity shared by both robots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopConstraint {
    pub id: u64,
    pub edge: Edge,
}

impl LoopConstraint {
    pub fn from_closure(id: u64, closure: &LoopClosure, from_index: usize, to_index: usize) -> Self {
        Self {
            id,
            edge: Edge {
                from: NodeKey::new(closure.from, from_index),
                to: NodeKey::new(closure.to, to_index),
                measurement: closure.relative_pose,
                information: closure.covariance.information(),
            },
        }
    }
}

/// Residual `z⁻¹ ⊕ (xᵢ⁻¹ ⊕ xⱼ)` as a 3-vector with wrapped heading.
pub fn edge_error(xi: &Pose2, xj: &Pose2, z: &Pose2) -> Vector3<f64> {
    z.between(&xi.between(xj)).to_vector()
}

/// Error and its Jacobians with respect to (x, y, θ) of both endpoints.
pub fn edge_linearize(xi: &Pose2, xj: &Pose2, z: &Pose2) -> (Vector3<f64>, Matrix3<f64>, Matrix3<f64>) {
    let (si, ci) = xi.theta.sin_cos();
    let (sz, cz) = z.theta.sin_cos();
    let rz_t = Matrix2::new(cz, sz, -sz, cz);
    let ri_t = Matrix2::new(ci, si, -si, ci);
    let dri_t = Matrix2::new(-si, ci, -ci, -si);
    let d = Vector2::new(xj.x - xi.x, xj.y - xi.y);
    let e_t = rz_t * (ri_t * d - Vector2::new(z.x, z.y));
    let e = Vector3::new(e_t.x, e_t.y, wrap_angle(xj.theta - xi.theta - z.theta));
    let rr = rz_t * ri_t;
    let dth = rz_t * dri_t * d;
    let a = Matrix3::new(
        -rr[(0, 0)], -rr[(0, 1)], dth.x,
        -rr[(1, 0)], -rr[(1, 1)], dth.y,
        0.0, 0.0, -1.0,
    );
    let b = Matrix3::new(
        rr[(0, 0)], rr[(0, 1)], 0.0,
        rr[(1, 0)], rr[(1, 1)], 0.0,
        0.0, 0.0, 1.0,
    );
    (e, a, b)
}

pub fn edge_cost(xi: &Pose2, xj: &Pose2, edge: &Edge) -> f64 {
    let e = edge_error(xi, xj, &edge.measurement);
    e.dot(&(edge.information * e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// One node per this many odometry samples.
    pub keyframe_every: usize,
    /// Per-step odometry sigmas used for edge information (m, rad).
    pub odom_trans_sigma: f64,
    pub odom_rot_sigma: f64,
    /// Lower bound on the per-step sigmas, keeping information finite.
    pub min_sigma: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            keyframe_every: 1,
            odom_trans_sigma: 0.001,
            odom_rot_sigma: 0.0005,
            min_sigma: 1e-4,
        }
    }
}

impl GraphConfig {
    /// Information of an odometry edge spanning `steps` samples.
    pub fn odometry_information(&self, steps: usize) -> Matrix3<f64> {
        let st = self.odom_trans_sigma.max(self.min_sigma);
        let sr = self.odom_rot_sigma.max(self.min_sigma);
        let k = steps.max(1) as f64;
        Matrix3::from_diagonal(&Vector3::new(
            1.0 / (k * st * st),
            1.0 / (k * st * st),
            1.0 / (k * sr * sr),
        ))
    }

    pub fn keyframe_of(&self, index: usize) -> usize {
        let k = self.keyframe_every.max(1);
        index - index % k
    }

    pub fn is_keyframe(&self, index: usize) -> bool {
        index % self.keyframe_every.max(1) == 0
    }
}

/// Nodes, a chain of odometry edges per robot, cross-robot loop edges and
/// an optional fixed anchor node.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoseGraph {
    pub nodes: BTreeMap<NodeKey, Node>,
    pub odometry_edges: Vec<Edge>,
    pub loop_edges: Vec<LoopConstraint>,
    pub anchor: Option<NodeKey>,
}

impl PoseGraph {
    pub fn pose(&self, key: &NodeKey) -> Option<Pose2> {
        self.nodes.get(key).map(|n| n.pose)
    }

    pub fn robots(&self) -> BTreeSet<RobotId> {
        self.nodes.keys().map(|k| k.robot).collect()
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.odometry_edges
            .iter()
            .chain(self.loop_edges.iter().map(|l| &l.edge))
    }

    /// Sum of squared Mahalanobis edge residuals over edges with both ends present.
    pub fn cost(&self) -> f64 {
        self.edges()
            .filter_map(|e| Some(edge_cost(&self.pose(&e.from)?, &self.pose(&e.to)?, e)))
            .sum()
    }

    /// Per-robot trajectory of node poses.
    pub fn trajectories(&self) -> BTreeMap<RobotId, Trajectory> {
        let mut out: BTreeMap<RobotId, Trajectory> = BTreeMap::new();
        for (k, n) in &self.nodes {
            out.entry(k.robot)
                .or_default()
                .push(n.t, n.pose)
                .expect("node stamps increase with index");
        }
        out
    }

    /// Combine fragments; loop edges shared by two fragments are kept once.
    pub fn merge(fragments: impl IntoIterator<Item = PoseGraph>) -> PoseGraph {
        let mut out = PoseGraph::default();
        let mut seen = BTreeSet::new();
        for f in fragments {
            out.nodes.extend(f.nodes);
            out.odometry_edges.extend(f.odometry_edges);
            for l in f.loop_edges {
                if seen.insert(l.id) {
                    out.loop_edges.push(l);
                }
            }
            out.anchor = out.anchor.or(f.anchor);
        }
        out.loop_edges.sort_by_key(|l| l.id);
        out
    }

    /// Nodes not connected to the anchor through any edge.
    pub fn unreachable_from_anchor(&self) -> Vec<NodeKey> {
        let Some(anchor) = self.anchor else {
            return self.nodes.keys().copied().collect();
        };
        let mut neighbours: BTreeMap<NodeKey, Vec<NodeKey>> = BTreeMap::new();
        for e in self.edges() {
            neighbours.entry(e.from).or_default().push(e.to);
            neighbours.entry(e.to).or_default().push(e.from);
        }
        let mut seen = BTreeSet::from([anchor]);
        let mut queue = VecDeque::from([anchor]);
        while let Some(k) = queue.pop_front() {
            for n in neighbours.get(&k).into_iter().flatten() {
                if self.nodes.contains_key(n) && seen.insert(*n) {
                    queue.push_back(*n);
                }
            }
        }
        self.nodes.keys().filter(|k| !seen.contains(k)).copied().collect()
    }

    /// Rigidly move each non-anchor robot so that one of its loop edges to
    /// an already placed robot is satisfied exactly. Robots are placed in
    /// breadth-first order from the anchor robot, using the lowest-id edge.
    pub fn initialize_from_loops(&mut self) {
        let Some(anchor) = self.anchor else { return };
        let mut placed = BTreeSet::from([anchor.robot]);
        loop {
            let mut progress = false;
            for l in &self.loop_edges.clone() {
                let e = &l.edge;
                let (free, target) = if placed.contains(&e.from.robot) && !placed.contains(&e.to.robot) {
                    let Some(xi) = self.pose(&e.from) else { continue };
                    (e.to, xi.compose(&e.measurement))
                } else if placed.contains(&e.to.robot) && !placed.contains(&e.from.robot) {
                    let Some(xj) = self.pose(&e.to) else { continue };
                    (e.from, xj.compose(&e.measurement.inverse()))
                } else {
                    continue;
                };
                let Some(current) = self.pose(&free) else { continue };
                let motion = target.compose(&current.inverse());
                for (k, n) in self.nodes.iter_mut() {
                    if k.robot == free.robot {
                        n.pose = motion.compose(&n.pose);
                    }
                }
                placed.insert(free.robot);
                progress = true;
            }
            if !progress {
                break;
            }
        }
    }
}

/// Fragment of one robot: keyframe nodes from its odometry, the odometry
/// chain between them, and every loop constraint touching the robot.
///
/// Keyframes are every `keyframe_every`-th sample plus the samples that
/// loop constraints attach to; node poses start at the odometry.
pub fn build_local_graph(
    robot: RobotId,
    odometry: &Trajectory,
    constraints: &[LoopConstraint],
    cfg: &GraphConfig,
) -> PoseGraph {
    let touching: Vec<LoopConstraint> = constraints
        .iter()
        .filter(|c| c.edge.from.robot == robot || c.edge.to.robot == robot)
        .copied()
        .collect();
    let attached: BTreeSet<usize> = touching
        .iter()
        .flat_map(|c| [c.edge.from, c.edge.to])
        .filter(|k| k.robot == robot)
        .map(|k| k.index)
        .collect();
    let mut graph = PoseGraph::default();
    let mut previous: Option<(usize, Pose2)> = None;
    for (index, (t, pose)) in odometry.iter().enumerate() {
        if !(cfg.is_keyframe(index) || attached.contains(&index)) {
            continue;
        }
        let key = NodeKey::new(robot, index);
        graph.nodes.insert(key, Node { t, pose });
        if let Some((prev_index, prev_pose)) = previous {
            graph.odometry_edges.push(Edge {
                from: NodeKey::new(robot, prev_index),
                to: key,
                measurement: prev_pose.between(&pose),
                information: cfg.odometry_information(index - prev_index),
            });
        }
        previous = Some((index, pose));
    }
    graph.loop_edges = touching;
    graph
}

/// Full graph from every robot's odometry, anchored at robot 0's first node.
pub fn build_graph(
    odometry: &BTreeMap<RobotId, Trajectory>,
    constraints: &[LoopConstraint],
    cfg: &GraphConfig,
) -> PoseGraph {
    let graph = PoseGraph::merge(
        odometry
            .iter()
            .map(|(&r, traj)| build_local_graph(r, traj, constraints, cfg)),
    );
    anchor_gauge(graph)
}

/// Express every pose relative to the first node of the lowest robot id and
/// fix that node.
pub fn anchor_gauge(mut graph: PoseGraph) -> PoseGraph {
    let Some((&key, node)) = graph.nodes.iter().next() else {
        return graph;
    };
    let correction = node.pose.inverse();
    if node.pose != Pose2::identity() {
        for n in graph.nodes.values_mut() {
            n.pose = correction.compose(&n.pose);
        }
        graph.nodes.get_mut(&key).expect("present").pose = Pose2::identity();
    }
    graph.anchor = Some(key);
    graph
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn numeric_jacobians(xi: &Pose2, xj: &Pose2, z: &Pose2) -> (Matrix3<f64>, Matrix3<f64>) {
        let h = 1e-6;
        let mut a = Matrix3::zeros();
        let mut b = Matrix3::zeros();
        for k in 0..3 {
            let mut d = Vector3::zeros();
            d[k] = h;
            let pi = Pose2::from_vector(&(xi.to_vector() + d));
            let mi = Pose2::from_vector(&(xi.to_vector() - d));
            let pj = Pose2::from_vector(&(xj.to_vector() + d));
            let mj = Pose2::from_vector(&(xj.to_vector() - d));
            let mut da = edge_error(&pi, xj, z) - edge_error(&mi, xj, z);
            let mut db = edge_error(xi, &pj, z) - edge_error(xi, &mj, z);
            da[2] = wrap_angle(da[2]);
            db[2] = wrap_angle(db[2]);
            a.set_column(k, &(da / (2.0 * h)));
            b.set_column(k, &(db / (2.0 * h)));
        }
        (a, b)
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let cases = [
            (Pose2::new(1.0, 2.0, 0.3), Pose2::new(-0.5, 4.0, 2.9), Pose2::new(0.7, -1.0, -3.0)),
            (Pose2::new(0.0, 0.0, PI), Pose2::new(3.0, -1.0, -2.0), Pose2::new(2.0, 2.0, 1.0)),
        ];
        for (xi, xj, z) in cases {
            let (e, a, b) = edge_linearize(&xi, &xj, &z);
            assert!((e - edge_error(&xi, &xj, &z)).norm() < 1e-12);
            let (na, nb) = numeric_jacobians(&xi, &xj, &z);
            assert!((a - na).norm() < 1e-6, "{a} vs {na}");
            assert!((b - nb).norm() < 1e-6, "{b} vs {nb}");
        }
    }

    fn chain(n: usize) -> Trajectory {
        Trajectory::from_samples((0..n).map(|k| (k as f64 * 0.1, Pose2::new(0.1 * k as f64, 0.0, 0.05 * k as f64)))).unwrap()
    }

    #[test]
    fn every_sample_keyframe_gives_chain() {
        let g = build_local_graph(RobotId(0), &chain(10), &[], &GraphConfig::default());
        assert_eq!(g.nodes.len(), 10);
        assert_eq!(g.odometry_edges.len(), 9);
        assert!(g.cost() < 1e-20);
    }

    #[test]
    fn decimation_keeps_attached_samples() {
        let lc = LoopConstraint {
            id: 0,
            edge: Edge {
                from: NodeKey::new(RobotId(0), 7),
                to: NodeKey::new(RobotId(1), 3),
                measurement: Pose2::identity(),
                information: Matrix3::identity(),
            },
        };
        let cfg = GraphConfig {
            keyframe_every: 5,
            ..GraphConfig::default()
        };
        let g = build_local_graph(RobotId(0), &chain(12), &[lc], &cfg);
        let idx: Vec<usize> = g.nodes.keys().map(|k| k.index).collect();
        assert_eq!(idx, vec![0, 5, 7, 10]);
        assert_eq!(g.loop_edges.len(), 1);
    }

    #[test]
    fn anchoring_is_idempotent() {
        let mut odo = BTreeMap::new();
        odo.insert(RobotId(0), chain(5).map_poses(|p| Pose2::new(3.0, 1.0, 0.4).compose(p)));
        odo.insert(RobotId(1), chain(5));
        let g = build_graph(&odo, &[], &GraphConfig::default());
        assert_eq!(g.anchor, Some(NodeKey::new(RobotId(0), 0)));
        assert_eq!(g.pose(&NodeKey::new(RobotId(0), 0)), Some(Pose2::identity()));
        let again = anchor_gauge(g.clone());
        assert_eq!(again, g);
    }

    #[test]
    fn unreachable_nodes_are_listed() {
        let mut odo = BTreeMap::new();
        odo.insert(RobotId(0), chain(3));
        odo.insert(RobotId(1), chain(2));
        let g = build_graph(&odo, &[], &GraphConfig::default());
        assert_eq!(
            g.unreachable_from_anchor(),
            vec![NodeKey::new(RobotId(1), 0), NodeKey::new(RobotId(1), 1)]
        );
    }
}
