//! Round-robin block-coordinate optimization where robots exchange only the
//! poses of their nodes that touch loop edges.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::local::{local_block_optimize, LocalConfig, LocalOutcome};
use super::{build_local_graph, GraphConfig, LoopConstraint, Node, NodeKey, PoseGraph};
use crate::geometry::Pose2;
use crate::network::{Message, NetConfig, Network, Payload};
use crate::scenario::RobotId;
use crate::trajectory::Trajectory;

/// Poses of the sender's separator nodes shared with one neighbour.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparatorPoseMsg {
    pub sender: RobotId,
    pub iteration: u64,
    /// Whether the sender's poses are already expressed in the anchor frame.
    pub initialized: bool,
    pub poses: Vec<(NodeKey, Pose2)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpgoConfig {
    pub max_rounds: usize,
    /// Converged once no robot moves any pose by more than this (m and rad).
    pub step_tolerance: f64,
    /// Rounds per simulated second in the online pipeline.
    pub update_rate: f64,
    /// Initial Levenberg-Marquardt damping of each local solve.
    pub damping: f64,
    /// Gauss-Newton iterations per local solve.
    pub local_iterations: usize,
}

impl Default for DpgoConfig {
    fn default() -> Self {
        Self {
            max_rounds: 1000,
            step_tolerance: 1e-6,
            update_rate: 1.0,
            damping: 1e-6,
            local_iterations: 10,
        }
    }
}

impl DpgoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_rounds == 0 || self.local_iterations == 0 {
            return Err("max_rounds and local_iterations must be > 0".into());
        }
        if !(self.step_tolerance > 0.0 && self.update_rate > 0.0 && self.damping > 0.0) {
            return Err("step_tolerance, update_rate and damping must be > 0".into());
        }
        Ok(())
    }

    fn local(&self) -> LocalConfig {
        LocalConfig {
            iterations: self.local_iterations,
            initial_lambda: self.damping,
        }
    }
}

/// One robot's share of the distributed problem.
#[derive(Debug, Clone)]
pub struct DpgoAgent {
    robot: RobotId,
    anchored: bool,
    graph_cfg: GraphConfig,
    fragment: PoseGraph,
    separators: BTreeMap<NodeKey, Pose2>,
    initialized: bool,
    /// No pose has been moved away from (anchored) odometry yet.
    pristine: bool,
    iteration: u64,
    last: LocalOutcome,
    bytes_sent: u64,
}

impl DpgoAgent {
    /// An agent without data. The anchored agent owns the gauge and starts
    /// initialized; the others wait for a loop edge to an initialized
    /// neighbour.
    pub fn new(robot: RobotId, anchored: bool, graph_cfg: GraphConfig) -> Self {
        Self {
            robot,
            anchored,
            graph_cfg,
            fragment: PoseGraph::default(),
            separators: BTreeMap::new(),
            initialized: anchored,
            pristine: true,
            iteration: 0,
            last: LocalOutcome::default(),
            bytes_sent: 0,
        }
    }

    /// An agent over an existing fragment whose poses are taken as given.
    pub fn from_fragment(robot: RobotId, mut fragment: PoseGraph, anchored: bool, initialized: bool) -> Self {
        if !anchored {
            fragment.anchor = None;
        }
        Self {
            fragment,
            initialized: initialized || anchored,
            pristine: false,
            ..Self::new(robot, anchored, GraphConfig::default())
        }
    }

    pub fn robot(&self) -> RobotId {
        self.robot
    }

    pub fn fragment(&self) -> &PoseGraph {
        &self.fragment
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Initialized, or without loop edges and therefore never moving.
    pub fn is_ready(&self) -> bool {
        self.initialized || self.fragment.loop_edges.is_empty()
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Bytes of every separator message handed to the network.
    pub fn bytes_sent(&self) -> u64 {
        self.bytes_sent
    }

    pub fn last_outcome(&self) -> &LocalOutcome {
        &self.last
    }

    pub fn neighbours(&self) -> BTreeSet<RobotId> {
        self.fragment
            .loop_edges
            .iter()
            .flat_map(|l| [l.edge.from.robot, l.edge.to.robot])
            .filter(|&r| r != self.robot)
            .collect()
    }

    fn anchor_frame(&self, odometry: &Trajectory) -> Option<Pose2> {
        let first = odometry.get(0)?.1;
        (self.anchored && first != Pose2::identity()).then(|| first.inverse())
    }

    /// Rebuild the fragment from the current odometry and loop constraints,
    /// keeping the estimates of nodes that already existed. New nodes are
    /// chained from their predecessor's estimate by odometry.
    pub fn update(&mut self, odometry: &Trajectory, constraints: &[LoopConstraint]) {
        let mut next = build_local_graph(self.robot, odometry, constraints, &self.graph_cfg);
        let frame = self.anchor_frame(odometry);
        let mut previous: Option<(usize, Pose2)> = None;
        for (key, node) in next.nodes.iter_mut() {
            let raw = odometry.get(key.index).expect("node from odometry").1;
            node.pose = if self.pristine {
                frame.map_or(raw, |f| f.compose(&raw))
            } else if let Some(old) = self.fragment.nodes.get(key) {
                old.pose
            } else if let Some((prev_index, prev_pose)) = previous {
                let prev_raw = odometry.get(prev_index).expect("node from odometry").1;
                prev_pose.compose(&prev_raw.between(&raw))
            } else {
                frame.map_or(raw, |f| f.compose(&raw))
            };
            previous = Some((key.index, node.pose));
        }
        if self.anchored {
            next.anchor = next.nodes.keys().next().copied();
        }
        self.fragment = next;
    }

    /// Full-rate trajectory: every odometry sample placed relative to the
    /// latest node at or before it.
    pub fn estimate(&self, odometry: &Trajectory) -> Trajectory {
        let frame = self.anchor_frame(odometry);
        let mut out = Trajectory::new();
        let mut base: Option<(Pose2, Pose2)> = None;
        for (index, (t, raw)) in odometry.iter().enumerate() {
            let pose = if self.pristine {
                frame.map_or(raw, |f| f.compose(&raw))
            } else if let Some(node) = self.fragment.nodes.get(&NodeKey::new(self.robot, index)) {
                base = Some((node.pose, raw));
                node.pose
            } else if let Some((est, odo)) = base {
                est.compose(&odo.between(&raw))
            } else {
                frame.map_or(raw, |f| f.compose(&raw))
            };
            out.push(t, pose).expect("odometry stamps increase");
        }
        out
    }

    /// Record a neighbour's separator poses. An uninitialized agent that
    /// hears from an initialized neighbour it shares a loop edge with moves
    /// rigidly so that the lowest-id such edge holds exactly.
    pub fn receive(&mut self, msg: &SeparatorPoseMsg) {
        if !msg.initialized {
            return;
        }
        for &(k, p) in &msg.poses {
            self.separators.insert(k, p);
        }
        if self.initialized {
            return;
        }
        let mut edges: Vec<&LoopConstraint> = self.fragment.loop_edges.iter().collect();
        edges.sort_by_key(|l| l.id);
        for l in edges {
            let e = &l.edge;
            let (own, target) = if e.to.robot == self.robot && e.from.robot == msg.sender {
                let Some(xi) = self.separators.get(&e.from) else { continue };
                (e.to, xi.compose(&e.measurement))
            } else if e.from.robot == self.robot && e.to.robot == msg.sender {
                let Some(xj) = self.separators.get(&e.to) else { continue };
                (e.from, xj.compose(&e.measurement.inverse()))
            } else {
                continue;
            };
            let Some(current) = self.fragment.pose(&own) else { continue };
            let motion = target.compose(&current.inverse());
            for n in self.fragment.nodes.values_mut() {
                n.pose = motion.compose(&n.pose);
            }
            self.initialized = true;
            self.pristine = false;
            return;
        }
    }

    /// One local solve with the latest neighbour poses held fixed.
    pub fn optimize(&mut self, cfg: &DpgoConfig) -> LocalOutcome {
        self.last = if self.initialized {
            let out = local_block_optimize(&mut self.fragment, self.robot, &self.separators, &cfg.local());
            if out.step_norm > 0.0 {
                self.pristine = false;
            }
            out
        } else {
            LocalOutcome {
                missing_separators: self.fragment.loop_edges.len(),
                ..LocalOutcome::default()
            }
        };
        self.last
    }

    /// Separator poses for every neighbour, ordered by node key. Nothing is
    /// sent before initialization.
    pub fn separator_messages(&mut self) -> Vec<(RobotId, SeparatorPoseMsg)> {
        if !self.initialized {
            return Vec::new();
        }
        self.iteration += 1;
        let mut per: BTreeMap<RobotId, BTreeSet<NodeKey>> = BTreeMap::new();
        for l in &self.fragment.loop_edges {
            let e = &l.edge;
            if e.from.robot == self.robot {
                per.entry(e.to.robot).or_default().insert(e.from);
            } else if e.to.robot == self.robot {
                per.entry(e.from.robot).or_default().insert(e.to);
            }
        }
        per.into_iter()
            .map(|(neighbour, keys)| {
                let poses = keys
                    .into_iter()
                    .filter_map(|k| Some((k, self.fragment.pose(&k)?)))
                    .collect();
                (
                    neighbour,
                    SeparatorPoseMsg {
                        sender: self.robot,
                        iteration: self.iteration,
                        initialized: true,
                        poses,
                    },
                )
            })
            .collect()
    }
}

/// Anything that carries a [`DpgoAgent`] and can take the other messages
/// found in its mailbox during a round.
pub trait DpgoParticipant {
    fn robot(&self) -> RobotId;
    fn dpgo_agent(&mut self) -> &mut DpgoAgent;
    fn deliver(&mut self, message: Message);
}

impl DpgoParticipant for DpgoAgent {
    fn robot(&self) -> RobotId {
        self.robot
    }

    fn dpgo_agent(&mut self) -> &mut DpgoAgent {
        self
    }

    fn deliver(&mut self, _message: Message) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RoundStatus {
    /// Every agent is ready, saw all its separators and moved less than the
    /// step tolerance.
    pub converged: bool,
    /// Every agent is ready and no loop edge lacked a separator pose.
    pub complete: bool,
    pub max_step: f64,
}

/// One sweep: in ascending id order each robot reads its mailbox, solves its
/// block and sends its separator poses.
pub fn dpgo_round<P: DpgoParticipant>(
    participants: &mut [P],
    network: &mut Network,
    now: f64,
    positions: &BTreeMap<RobotId, (f64, f64)>,
    cfg: &DpgoConfig,
) -> RoundStatus {
    debug_assert!(participants.windows(2).all(|w| w[0].robot() < w[1].robot()));
    let mut status = RoundStatus {
        converged: true,
        complete: true,
        max_step: 0.0,
    };
    for p in participants.iter_mut() {
        network.step(now, positions);
        for m in network.receive(p.robot()) {
            match m.payload {
                Payload::SeparatorPoses(ref s) => p.dpgo_agent().receive(s),
                _ => p.deliver(m),
            }
        }
        let robot = p.robot();
        let agent = p.dpgo_agent();
        let out = agent.optimize(cfg);
        if !agent.is_ready() || out.missing_separators > 0 {
            status.complete = false;
        }
        status.max_step = status.max_step.max(out.step_norm);
        for (to, msg) in agent.separator_messages() {
            let m = Message::new(robot, to, now, Payload::SeparatorPoses(msg));
            agent.bytes_sent += m.size_bytes() as u64;
            network.send(m);
        }
    }
    status.converged = status.complete && status.max_step < cfg.step_tolerance;
    network.step(now, positions);
    status
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributedResult {
    pub graph: PoseGraph,
    /// Global cost at the start of the first round in which every agent was
    /// ready, then after each later round.
    pub cost_trace: Vec<f64>,
    pub rounds: usize,
    pub converged: bool,
}

/// Split a graph into per-robot fragments.
pub fn split_fragments(graph: &PoseGraph) -> BTreeMap<RobotId, PoseGraph> {
    let mut out: BTreeMap<RobotId, PoseGraph> = graph
        .robots()
        .into_iter()
        .map(|r| (r, PoseGraph::default()))
        .collect();
    for (k, n) in &graph.nodes {
        out.get_mut(&k.robot).expect("robot").nodes.insert(*k, Node { ..*n });
    }
    for e in &graph.odometry_edges {
        if let Some(f) = out.get_mut(&e.from.robot) {
            f.odometry_edges.push(*e);
        }
    }
    for l in &graph.loop_edges {
        for r in [l.edge.from.robot, l.edge.to.robot] {
            if let Some(f) = out.get_mut(&r) {
                f.loop_edges.push(*l);
            }
        }
    }
    if let Some(a) = graph.anchor {
        if let Some(f) = out.get_mut(&a.robot) {
            f.anchor = Some(a);
        }
    }
    out
}

fn merged(agents: &[DpgoAgent]) -> PoseGraph {
    PoseGraph::merge(agents.iter().map(|a| a.fragment.clone()))
}

/// Run rounds over a complete graph on a lossless network with every robot
/// in range until convergence or `max_rounds`. Only the anchor robot starts
/// initialized; the others align through their loop edges.
pub fn solve_distributed(graph: &PoseGraph, cfg: &DpgoConfig) -> DistributedResult {
    let anchor_robot = graph.anchor.map(|a| a.robot);
    let mut agents: Vec<DpgoAgent> = split_fragments(graph)
        .into_iter()
        .map(|(r, f)| DpgoAgent::from_fragment(r, f, Some(r) == anchor_robot, false))
        .collect();
    let positions: BTreeMap<RobotId, (f64, f64)> = agents.iter().map(|a| (a.robot, (0.0, 0.0))).collect();
    let mut network = Network::new(NetConfig {
        comm_range: f64::INFINITY,
        ..NetConfig::default()
    });
    let mut cost_trace = Vec::new();
    let mut rounds = 0;
    let mut converged = false;
    let mut stalled = 0;
    while rounds < cfg.max_rounds {
        let ready = agents.iter().all(DpgoAgent::is_ready);
        if ready && cost_trace.is_empty() {
            cost_trace.push(merged(&agents).cost());
        }
        rounds += 1;
        let status = dpgo_round(&mut agents, &mut network, rounds as f64, &positions, cfg);
        if !cost_trace.is_empty() {
            cost_trace.push(merged(&agents).cost());
        }
        if status.converged {
            converged = true;
            break;
        }
        // agents cut off from the anchor can never initialize
        stalled = if ready { 0 } else { stalled + 1 };
        if stalled > agents.len() {
            break;
        }
    }
    DistributedResult {
        graph: merged(&agents),
        cost_trace,
        rounds,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpgo::{build_graph, centralized_solve, CentralConfig, Edge};
    use nalgebra::Matrix3;

    fn wiggle(offset: Pose2, n: usize, phase: f64) -> Trajectory {
        Trajectory::from_samples((0..n).map(|k| {
            let t = k as f64 * 0.1;
            (t, offset.compose(&Pose2::new(0.3 * t, (0.5 * t + phase).sin(), 0.2 * t)))
        }))
        .unwrap()
    }

    fn scene(noisy: bool) -> (PoseGraph, BTreeMap<RobotId, Trajectory>) {
        let starts = [Pose2::identity(), Pose2::new(2.0, 1.0, 0.5), Pose2::new(-1.0, 3.0, -1.0)];
        let truth: BTreeMap<RobotId, Trajectory> = starts
            .iter()
            .enumerate()
            .map(|(r, s)| (RobotId(r as u32), wiggle(*s, 40, r as f64)))
            .collect();
        let odo: BTreeMap<RobotId, Trajectory> = truth
            .iter()
            .map(|(r, t)| {
                let first = t.get(0).unwrap().1.inverse();
                (*r, t.map_poses(|p| {
                    let q = first.compose(p);
                    if noisy {
                        Pose2::new(q.x * 1.01, q.y, q.theta + 0.002 * q.x)
                    } else {
                        q
                    }
                }))
            })
            .collect();
        let mut loops = Vec::new();
        for (id, (a, b, k)) in [(0u32, 1u32, 5usize), (0, 1, 30), (1, 2, 12), (1, 2, 35), (0, 2, 20)]
            .into_iter()
            .enumerate()
        {
            let ta = &truth[&RobotId(a)];
            let tb = &truth[&RobotId(b)];
            let mut z = ta.get(k).unwrap().1.between(&tb.get(k).unwrap().1);
            if noisy {
                z = Pose2::new(z.x + 0.05, z.y - 0.03, z.theta + 0.01);
            }
            loops.push(LoopConstraint {
                id: id as u64,
                edge: Edge {
                    from: NodeKey::new(RobotId(a), k),
                    to: NodeKey::new(RobotId(b), k),
                    measurement: z,
                    information: Matrix3::from_diagonal(&nalgebra::Vector3::new(4.0, 4.0, 40.0)),
                },
            });
        }
        (build_graph(&odo, &loops, &GraphConfig::default()), truth)
    }

    #[test]
    fn noiseless_scene_converges_to_zero_cost() {
        let (g, truth) = scene(false);
        let r = solve_distributed(&g, &DpgoConfig::default());
        assert!(r.converged);
        assert!(*r.cost_trace.last().unwrap() < 1e-12, "{:?}", r.cost_trace.last());
        for (k, n) in &r.graph.nodes {
            let p = truth[&k.robot].get(k.index).unwrap().1;
            assert!(n.pose.translation_distance(&p) < 1e-5, "{k}");
        }
    }

    #[test]
    fn noisy_scene_matches_centralized_and_decreases() {
        let (g, _) = scene(true);
        let r = solve_distributed(&g, &DpgoConfig::default());
        assert!(r.converged);
        for w in r.cost_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} > {}", w[1], w[0]);
        }
        let mut init = g.clone();
        init.initialize_from_loops();
        let c = centralized_solve(&init, &CentralConfig::default()).unwrap();
        let d = *r.cost_trace.last().unwrap();
        assert!(d <= c.cost * 1.01 + 1e-9, "distributed {d} centralized {}", c.cost);
        assert_eq!(r.graph.pose(&g.anchor.unwrap()), Some(Pose2::identity()));
    }

    #[test]
    fn no_loops_is_untouched() {
        let (mut g, _) = scene(true);
        g.loop_edges.clear();
        let r = solve_distributed(&g, &DpgoConfig::default());
        assert_eq!(r.graph, g);
        assert!(r.converged);
    }

    #[test]
    fn agent_update_keeps_estimates_and_chains_new_nodes() {
        let odo = wiggle(Pose2::identity(), 20, 0.0);
        let mut agent = DpgoAgent::new(RobotId(0), true, GraphConfig::default());
        let head = Trajectory::from_samples(odo.iter().take(10)).unwrap();
        agent.update(&head, &[]);
        assert_eq!(agent.estimate(&head), head);
        agent.pristine = false;
        let shifted = Pose2::new(0.0, 0.5, 0.0);
        let k9 = NodeKey::new(RobotId(0), 9);
        agent.fragment.nodes.get_mut(&k9).unwrap().pose = shifted;
        agent.update(&odo, &[]);
        assert_eq!(agent.fragment.pose(&k9), Some(shifted));
        let expect = shifted.compose(&odo.get(9).unwrap().1.between(&odo.get(15).unwrap().1));
        let got = agent.fragment.pose(&NodeKey::new(RobotId(0), 15)).unwrap();
        assert!(got.translation_distance(&expect) < 1e-12);
    }

    #[test]
    fn uninitialized_agent_is_silent() {
        let mut agent = DpgoAgent::new(RobotId(1), false, GraphConfig::default());
        let (g, _) = scene(false);
        agent.fragment = split_fragments(&g).remove(&RobotId(1)).unwrap();
        assert!(agent.separator_messages().is_empty());
        assert!(!agent.is_ready());
    }
}
