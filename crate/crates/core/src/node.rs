//! Per-robot agent: buffers its own odometry and ranging, exchanges
//! odometry with neighbours, estimates relative poses, filters them with PCM
//! and takes part in distributed pose-graph optimization.
//!
//! The lower-id robot of each pair owns estimation and PCM for that pair.
//! The higher-id robot shares its recent odometry while the two are ranging
//! each other and receives the resulting closures and inlier verdicts.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dpgo::{DpgoAgent, DpgoConfig, DpgoParticipant, GraphConfig, LoopConstraint, NodeKey};
use crate::estimation::{estimate_relative_pose, EstimatorConfig, LoopClosure, RangingWindow};
use crate::geometry::Pose2;
use crate::network::{LoopClosureMsg, Message, OdomWindowMsg, Payload, PcmVerdictMsg};
use crate::pcm::{ConsistencyGraph, Gate, OdometryAccess, PcmConfig};
use crate::scenario::{RangingMeasurement, RobotId};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub estimator: EstimatorConfig,
    pub pcm: PcmConfig,
    pub dpgo: DpgoConfig,
    pub graph: GraphConfig,
    /// Minimum simulated time between two estimates of one pair (s).
    pub estimate_period: f64,
    /// A neighbour counts as close while its ranging is at most this old (s).
    pub share_timeout: f64,
    /// Estimate loop closures at all; off leaves dead reckoning.
    pub closures: bool,
    /// Filter closures with PCM; off accepts every closure.
    pub pcm_enabled: bool,
    /// Share of closures replaced by uniformly random poses.
    pub outlier_fraction: f64,
    pub outlier_seed: u64,
    /// Tick robots on separate threads between network steps.
    pub parallel: bool,
    /// Extra rounds at the end of a run, stopping early on convergence.
    pub final_rounds: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorConfig::default(),
            pcm: PcmConfig::default(),
            dpgo: DpgoConfig::default(),
            graph: GraphConfig::default(),
            estimate_period: 1.0,
            share_timeout: 1.0,
            closures: true,
            pcm_enabled: true,
            outlier_fraction: 0.0,
            outlier_seed: 0,
            parallel: false,
            final_rounds: 1000,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.estimator.search.validate().map_err(|e| e.to_string())?;
        if !(self.estimator.tau > 0.0) {
            return Err("tau must be > 0".into());
        }
        if !(self.pcm.epsilon > 0.0 && self.pcm.epsilon < 1.0) {
            return Err("pcm epsilon must lie in (0, 1)".into());
        }
        self.pcm.gate().map_err(|e| e.to_string())?;
        self.dpgo.validate()?;
        if !(self.estimate_period > 0.0 && self.share_timeout > 0.0) {
            return Err("estimate_period and share_timeout must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err("outlier_fraction must lie in [0, 1]".into());
        }
        if self.graph.keyframe_every == 0 {
            return Err("keyframe_every must be > 0".into());
        }
        Ok(())
    }
}

/// A closure with its graph attachment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosureRecord {
    pub id: u64,
    pub closure: LoopClosure,
    pub from_index: usize,
    pub to_index: usize,
    /// Replaced by a random pose for outlier experiments.
    pub injected: bool,
}

impl ClosureRecord {
    pub fn constraint(&self) -> LoopConstraint {
        LoopConstraint::from_closure(self.id, &self.closure, self.from_index, self.to_index)
    }
}

/// What a robot keeps about one neighbour.
#[derive(Debug, Clone)]
pub struct NeighborState {
    pub peer: RobotId,
    /// Recent peer odometry: sample index, stamp, pose.
    pub odometry: VecDeque<(usize, f64, Pose2)>,
    /// Recent ranges measured by this robot to the peer.
    pub ranges: VecDeque<(f64, f64)>,
    pub last_estimate: f64,
    pub last_range: f64,
    /// Own odometry index shared up to (exclusive).
    pub shared_upto: usize,
    /// Peer odometry at the stamps of this pair's closures.
    pub closure_odometry: Trajectory,
    pub pcm: ConsistencyGraph,
    pub skipped: usize,
    next_seq: u64,
}

impl NeighborState {
    fn new(own: RobotId, peer: RobotId) -> Self {
        Self {
            peer,
            odometry: VecDeque::new(),
            ranges: VecDeque::new(),
            last_estimate: f64::NEG_INFINITY,
            last_range: f64::NEG_INFINITY,
            shared_upto: 0,
            closure_odometry: Trajectory::new(),
            pcm: ConsistencyGraph::new(own, peer),
            skipped: 0,
            next_seq: 0,
        }
    }

    fn peer_trajectory(&self) -> Trajectory {
        Trajectory::from_samples(self.odometry.iter().map(|&(_, t, p)| (t, p))).expect("buffer stamps increase")
    }
}

/// Own odometry interpolated, peer odometry only at recorded closure stamps.
struct PairOdometry<'a> {
    own_id: RobotId,
    own: &'a Trajectory,
    peer_id: RobotId,
    peer: &'a Trajectory,
}

impl OdometryAccess for PairOdometry<'_> {
    fn odometry_pose(&self, robot: RobotId, t: f64) -> Option<Pose2> {
        if robot == self.own_id {
            self.own.pose_at(t)
        } else if robot == self.peer_id {
            self.peer.nearest(t, 1e-9)
        } else {
            None
        }
    }
}

/// Read-only view of a robot's state.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSnapshot {
    pub robot: RobotId,
    pub trajectory: Trajectory,
    pub raw_closures: usize,
    pub inlier_closures: usize,
    /// Latest clique size of every owned pair, by peer.
    pub clique_sizes: BTreeMap<RobotId, usize>,
    pub bytes_sent: u64,
    pub dropped_messages: usize,
    pub skipped_estimates: usize,
}

/// Wall-clock durations of the expensive operations (ms).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodeTimings {
    pub estimation: Vec<f64>,
    pub pcm: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RobotNode {
    id: RobotId,
    cfg: PipelineConfig,
    window: usize,
    odometry: Trajectory,
    peers: BTreeMap<RobotId, NeighborState>,
    closures: BTreeMap<u64, ClosureRecord>,
    inliers: BTreeMap<RobotId, BTreeSet<u64>>,
    agent: DpgoAgent,
    pending: Vec<Message>,
    rng: ChaCha8Rng,
    bytes_sent: u64,
    dropped: usize,
    timings: NodeTimings,
}

fn millis(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn closure_id(from: RobotId, to: RobotId, seq: u64) -> u64 {
    (u64::from(from.0) << 48) | (u64::from(to.0) << 32) | seq
}

impl RobotNode {
    /// `uwb_rate` converts a window given in seconds into samples.
    pub fn new(id: RobotId, anchored: bool, cfg: PipelineConfig, uwb_rate: f64) -> Self {
        let window = cfg.estimator.window_samples(uwb_rate);
        let seed = cfg.outlier_seed ^ 0x6f75_746c_6965_7273 ^ u64::from(id.0).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        Self {
            id,
            agent: DpgoAgent::new(id, anchored, cfg.graph),
            cfg,
            window,
            odometry: Trajectory::new(),
            peers: BTreeMap::new(),
            closures: BTreeMap::new(),
            inliers: BTreeMap::new(),
            pending: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            bytes_sent: 0,
            dropped: 0,
            timings: NodeTimings::default(),
        }
    }

    pub fn id(&self) -> RobotId {
        self.id
    }

    pub fn odometry(&self) -> &Trajectory {
        &self.odometry
    }

    pub fn timings(&self) -> &NodeTimings {
        &self.timings
    }

    pub fn agent(&self) -> &DpgoAgent {
        &self.agent
    }

    /// Messages delivered during a DPGO round, handled at the next tick.
    pub fn take_pending(&mut self) -> Vec<Message> {
        std::mem::take(&mut self.pending)
    }

    /// Every closure this robot knows, owned or received.
    pub fn closures(&self) -> impl Iterator<Item = &ClosureRecord> {
        self.closures.values()
    }

    /// Closures this robot estimated itself.
    pub fn owned_closures(&self) -> impl Iterator<Item = &ClosureRecord> {
        self.closures.values().filter(move |c| c.closure.from == self.id)
    }

    pub fn inlier_ids(&self) -> BTreeSet<u64> {
        self.inliers.values().flatten().copied().collect()
    }

    fn peer(&mut self, peer: RobotId) -> &mut NeighborState {
        let own = self.id;
        self.peers.entry(peer).or_insert_with(|| NeighborState::new(own, peer))
    }

    fn send(&mut self, out: &mut Vec<Message>, to: RobotId, now: f64, payload: Payload) {
        let m = Message::new(self.id, to, now, payload);
        self.bytes_sent += m.size_bytes() as u64;
        out.push(m);
    }

    /// Advance to `now`: ingest data and messages, share odometry, estimate
    /// and filter closures. Returns the messages to send.
    pub fn tick(
        &mut self,
        now: f64,
        odometry: Option<(f64, Pose2)>,
        rangings: &[RangingMeasurement],
        inbox: Vec<Message>,
    ) -> Vec<Message> {
        let mut out = Vec::new();
        if let Some((t, p)) = odometry {
            if self.odometry.push(t, p).is_err() {
                self.dropped += 1;
            }
        }
        for r in rangings {
            if r.from != self.id || r.to == self.id {
                continue;
            }
            let cap = self.window + 100;
            let ns = self.peer(r.to);
            ns.ranges.push_back((r.t, r.distance));
            while ns.ranges.len() > cap {
                ns.ranges.pop_front();
            }
            ns.last_range = ns.last_range.max(r.t);
        }
        for m in inbox {
            self.handle(m);
        }
        if !self.cfg.closures {
            return out;
        }
        let peers: Vec<RobotId> = self.peers.keys().copied().collect();
        for peer in peers {
            if peer > self.id {
                self.estimate_pair(now, peer, &mut out);
            } else {
                self.share_odometry(now, peer, &mut out);
            }
        }
        out
    }

    fn handle(&mut self, m: Message) {
        if m.receiver != self.id || m.sender == self.id {
            self.dropped += 1;
            return;
        }
        match m.payload {
            Payload::OdomWindow(w) if m.sender > self.id => {
                let span = self.window_span();
                let ns = self.peer(m.sender);
                for (i, t, p) in w.samples {
                    if ns.odometry.back().is_none_or(|&(_, last, _)| t > last) {
                        ns.odometry.push_back((i, t, p));
                    }
                }
                let newest = ns.odometry.back().map_or(f64::NEG_INFINITY, |s| s.1);
                while ns.odometry.front().is_some_and(|s| s.1 < newest - span) {
                    ns.odometry.pop_front();
                }
            }
            Payload::LoopClosure(lc)
                if m.sender < self.id && lc.closure.from == m.sender && lc.closure.to == self.id =>
            {
                self.closures.insert(
                    lc.id,
                    ClosureRecord {
                        id: lc.id,
                        closure: lc.closure,
                        from_index: lc.from_key.index,
                        to_index: lc.to_key.index,
                        injected: false,
                    },
                );
            }
            Payload::PcmVerdict(v) if m.sender < self.id && v.from == m.sender && v.to == self.id => {
                if v.inliers.iter().all(|id| self.closures.contains_key(id)) {
                    self.inliers.insert(m.sender, v.inliers.into_iter().collect());
                } else {
                    self.dropped += 1;
                }
            }
            Payload::SeparatorPoses(s) if s.sender == m.sender => self.agent.receive(&s),
            _ => self.dropped += 1,
        }
    }

    /// Time covered by one window plus slack for the odometry rate.
    fn window_span(&self) -> f64 {
        let rate = self.ranging_rate();
        self.window as f64 / rate + 2.0
    }

    fn ranging_rate(&self) -> f64 {
        self.peers
            .values()
            .find(|n| n.ranges.len() >= 2)
            .map(|n| {
                let span = n.ranges.back().unwrap().0 - n.ranges.front().unwrap().0;
                (n.ranges.len() - 1) as f64 / span.max(1e-9)
            })
            .unwrap_or(50.0)
    }

    fn share_odometry(&mut self, now: f64, peer: RobotId, out: &mut Vec<Message>) {
        let timeout = self.cfg.share_timeout;
        let span = self.window_span();
        let ns = &self.peers[&peer];
        if now - ns.last_range > timeout {
            return;
        }
        let start = ns.shared_upto;
        let first = self
            .odometry
            .times()
            .partition_point(|&t| t < now - span)
            .max(start);
        let samples: Vec<(usize, f64, Pose2)> = (first..self.odometry.len())
            .map(|i| {
                let (t, p) = self.odometry.get(i).expect("index");
                (i, t, p)
            })
            .collect();
        self.peer(peer).shared_upto = self.odometry.len();
        if !samples.is_empty() {
            self.send(out, peer, now, Payload::OdomWindow(OdomWindowMsg { samples }));
        }
    }

    fn estimate_pair(&mut self, now: f64, peer: RobotId, out: &mut Vec<Message>) {
        let period = self.cfg.estimate_period;
        let window = self.window;
        let ns = &self.peers[&peer];
        if now - ns.last_estimate < period - 1e-9 || ns.ranges.len() < window || ns.odometry.is_empty() {
            return;
        }
        let peer_traj = ns.peer_trajectory();
        let (Some(own_end), Some(peer_end)) = (self.odometry.last_time(), peer_traj.last_time()) else {
            return;
        };
        let ranges: Vec<(f64, f64)> = ns.ranges.iter().copied().collect();
        let end = own_end.min(peer_end);
        let Ok(w) = RangingWindow::from_streams(self.id, peer, &self.odometry, &peer_traj, &ranges, window, end) else {
            return;
        };
        if w.len() < window || ns.closure_odometry.last_time().is_some_and(|t| w.end_time() <= t) {
            return;
        }
        self.peer(peer).last_estimate = now;
        let start = Instant::now();
        let estimate = estimate_relative_pose(&w, &self.cfg.estimator);
        self.timings.estimation.push(millis(start));
        let Ok(mut closure) = estimate else {
            self.peer(peer).skipped += 1;
            return;
        };
        let tolerance = 0.5 * self.odometry_period();
        let (Some(from_index), Some(peer_slot), Some(peer_pose)) = (
            self.odometry.nearest_index(closure.t, tolerance),
            peer_traj.nearest_index(closure.t, tolerance),
            peer_traj.pose_at(closure.t),
        ) else {
            self.peer(peer).skipped += 1;
            return;
        };
        let to_index = self.peers[&peer].odometry[peer_slot].0;
        let injected = self.cfg.outlier_fraction > 0.0 && self.rng.random::<f64>() < self.cfg.outlier_fraction;
        if injected {
            closure.relative_pose = Pose2::new(
                self.rng.random_range(-10.0..10.0),
                self.rng.random_range(-10.0..10.0),
                self.rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            );
        }
        let gate: Gate = self.cfg.pcm.gate().expect("validated config");
        let exact_cap = self.cfg.pcm.exact_cap;
        let pcm_enabled = self.cfg.pcm_enabled;
        let own_id = self.id;
        let ns = self.peers.get_mut(&peer).expect("peer");
        ns.closure_odometry.push(closure.t, peer_pose).expect("closure stamps increase");
        let id = closure_id(own_id, peer, ns.next_seq);
        ns.next_seq += 1;
        let start = Instant::now();
        let odom = PairOdometry {
            own_id,
            own: &self.odometry,
            peer_id: peer,
            peer: &ns.closure_odometry,
        };
        ns.pcm.add(closure, &odom, &gate).expect("pair matches");
        let inliers: BTreeSet<u64> = if pcm_enabled {
            ns.pcm.solve(exact_cap);
            ns.pcm.clique().iter().map(|&i| closure_id(own_id, peer, i as u64)).collect()
        } else {
            (0..ns.pcm.len() as u64).map(|i| closure_id(own_id, peer, i)).collect()
        };
        self.timings.pcm.push(millis(start));
        let record = ClosureRecord {
            id,
            closure,
            from_index,
            to_index,
            injected,
        };
        self.closures.insert(id, record);
        self.send(
            out,
            peer,
            now,
            Payload::LoopClosure(LoopClosureMsg {
                id,
                closure,
                from_key: NodeKey::new(own_id, from_index),
                to_key: NodeKey::new(peer, to_index),
            }),
        );
        if self.inliers.get(&peer) != Some(&inliers) {
            self.send(
                out,
                peer,
                now,
                Payload::PcmVerdict(PcmVerdictMsg {
                    from: own_id,
                    to: peer,
                    inliers: inliers.iter().copied().collect(),
                }),
            );
            self.inliers.insert(peer, inliers);
        }
    }

    fn odometry_period(&self) -> f64 {
        let n = self.odometry.len();
        if n < 2 {
            return 0.1;
        }
        (self.odometry.times()[n - 1] - self.odometry.times()[0]) / (n - 1) as f64
    }

    /// Loop constraints of the current inlier sets.
    pub fn inlier_constraints(&self) -> Vec<LoopConstraint> {
        self.inlier_ids()
            .into_iter()
            .filter_map(|id| self.closures.get(&id).map(ClosureRecord::constraint))
            .collect()
    }

    /// Bring the DPGO fragment up to date with odometry and inliers.
    pub fn prepare_dpgo(&mut self) {
        if self.odometry.is_empty() {
            return;
        }
        let constraints = self.inlier_constraints();
        self.agent.update(&self.odometry, &constraints);
    }

    pub fn dpgo_config(&self) -> &DpgoConfig {
        &self.cfg.dpgo
    }

    pub fn snapshot(&self) -> NodeSnapshot {
        NodeSnapshot {
            robot: self.id,
            trajectory: self.agent.estimate(&self.odometry),
            raw_closures: self.closures.len(),
            inlier_closures: self.inlier_ids().len(),
            clique_sizes: self
                .peers
                .iter()
                .filter(|(p, _)| **p > self.id)
                .map(|(p, n)| (*p, n.pcm.clique().len()))
                .collect(),
            bytes_sent: self.bytes_sent + self.agent.bytes_sent(),
            dropped_messages: self.dropped,
            skipped_estimates: self.peers.values().map(|n| n.skipped).sum(),
        }
    }
}

impl DpgoParticipant for RobotNode {
    fn robot(&self) -> RobotId {
        self.id
    }

    fn dpgo_agent(&mut self) -> &mut DpgoAgent {
        &mut self.agent
    }

    fn deliver(&mut self, message: Message) {
        self.pending.push(message);
    }
}
