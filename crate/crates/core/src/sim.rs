//! Drives a team of [`RobotNode`]s over a dataset on the odometry clock.
//!
//! At every odometry stamp the network is stepped, each robot ticks on its
//! own inbox and measurements, and the outboxes are sent in id order. Ticks
//! within one stamp only see messages from earlier stamps, so sequential and
//! threaded execution give identical results. DPGO rounds run on their own
//! schedule with a deterministic round-robin order.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use thiserror::Error;

use crate::dpgo::{dpgo_round, PoseGraph};
use crate::geometry::Pose2;
use crate::network::{CommReport, Message, NetConfig, Network};
use crate::node::{ClosureRecord, NodeSnapshot, PipelineConfig, RobotNode};
use crate::scenario::{Dataset, RangingMeasurement, RobotId};
use crate::trajectory::Trajectory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset has no odometry")]
    EmptyDataset,
}

/// Global cost after one DPGO round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostSample {
    pub round: usize,
    pub t: f64,
    pub cost: f64,
    pub max_step: f64,
    pub complete: bool,
}

/// Wall-clock durations (ms).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timings {
    pub estimation: Vec<f64>,
    pub pcm: Vec<f64>,
    pub dpgo_round: Vec<f64>,
    /// One simulation step: every robot's tick.
    pub tick: Vec<f64>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Anchored full-rate estimate of every robot.
    pub trajectories: BTreeMap<RobotId, Trajectory>,
    /// Every closure estimated by its owner, by id.
    pub closures: Vec<ClosureRecord>,
    /// Final inlier ids from the owners' verdicts.
    pub inliers: BTreeSet<u64>,
    pub cost_trace: Vec<CostSample>,
    pub rounds: usize,
    pub converged: bool,
    pub comm: CommReport,
    /// Traffic up to the last data stamp, before the final rounds.
    pub online_comm: CommReport,
    pub timings: Timings,
    pub snapshots: Vec<NodeSnapshot>,
}

impl PipelineOutput {
    pub fn inlier_closures(&self) -> Vec<ClosureRecord> {
        self.closures
            .iter()
            .filter(|c| self.inliers.contains(&c.id))
            .copied()
            .collect()
    }
}

/// Ranging rate from the median spacing of the first ordered pair.
pub fn infer_ranging_rate(dataset: &Dataset) -> f64 {
    let Some(first) = dataset.ranging.first() else {
        return 50.0;
    };
    let stamps: Vec<f64> = dataset
        .ranging
        .iter()
        .filter(|r| r.from == first.from && r.to == first.to)
        .map(|r| r.t)
        .collect();
    let gaps: Vec<f64> = stamps.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).collect();
    median(&gaps).map_or(50.0, |g| 1.0 / g)
}

fn positions(dataset: &Dataset, robots: &[RobotId], t: f64) -> BTreeMap<RobotId, (f64, f64)> {
    robots
        .iter()
        .map(|&r| {
            let p = dataset
                .truth
                .as_ref()
                .and_then(|g| g.trajectories.get(&r))
                .and_then(|traj| traj.pose_at(t).or_else(|| traj.nearest(t, f64::INFINITY)))
                .unwrap_or_else(Pose2::identity);
            (r, (p.x, p.y))
        })
        .collect()
}

fn global_cost(nodes: &[RobotNode]) -> f64 {
    PoseGraph::merge(nodes.iter().map(|n| n.agent().fragment().clone())).cost()
}

type TickInput = (Option<(f64, Pose2)>, Vec<RangingMeasurement>, Vec<Message>);

fn tick_all(nodes: &mut [RobotNode], now: f64, inputs: Vec<TickInput>, parallel: bool) -> Vec<Vec<Message>> {
    if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = nodes
                .iter_mut()
                .zip(inputs)
                .map(|(node, (odo, ranging, inbox))| s.spawn(move || node.tick(now, odo, &ranging, inbox)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("robot thread panicked"))
                .collect()
        })
    } else {
        nodes
            .iter_mut()
            .zip(inputs)
            .map(|(node, (odo, ranging, inbox))| node.tick(now, odo, &ranging, inbox))
            .collect()
    }
}

/// Run the full pipeline. Robot positions for network range checks come
/// from ground truth when present; without it every robot is in range.
pub fn run_pipeline(dataset: &Dataset, cfg: &PipelineConfig, net: &NetConfig) -> Result<PipelineOutput, SimError> {
    cfg.validate().map_err(SimError::InvalidConfig)?;
    net.validate().map_err(SimError::InvalidConfig)?;
    let robots = dataset.robots();
    let Some(&anchor) = robots.first() else {
        return Err(SimError::EmptyDataset);
    };
    let rate = infer_ranging_rate(dataset);
    let mut nodes: Vec<RobotNode> = robots
        .iter()
        .map(|&r| RobotNode::new(r, r == anchor, cfg.clone(), rate))
        .collect();
    let mut network = Network::new(*net);
    let mut stamps: Vec<f64> = dataset.odometry.values().flat_map(|t| t.times().iter().copied()).collect();
    stamps.sort_by(f64::total_cmp);
    stamps.dedup();

    let mut cursor: BTreeMap<RobotId, usize> = robots.iter().map(|&r| (r, 0)).collect();
    let mut next_range = 0;
    let period = 1.0 / cfg.dpgo.update_rate;
    let mut next_round = stamps.first().copied().unwrap_or(0.0) + period;
    let mut timings = Timings::default();
    let mut cost_trace = Vec::new();
    let mut rounds = 0;
    let mut converged = false;
    let mut last_positions = BTreeMap::new();

    for &now in &stamps {
        let pos = positions(dataset, &robots, now);
        network.step(now, &pos);
        let mut per_robot: BTreeMap<RobotId, Vec<RangingMeasurement>> = BTreeMap::new();
        while next_range < dataset.ranging.len() && dataset.ranging[next_range].t <= now {
            let r = dataset.ranging[next_range];
            per_robot.entry(r.from).or_default().push(r);
            next_range += 1;
        }
        let inputs: Vec<TickInput> = nodes
            .iter_mut()
            .map(|node| {
                let id = node.id();
                let traj = &dataset.odometry[&id];
                let c = cursor.get_mut(&id).expect("robot");
                let odo = match traj.get(*c) {
                    Some((t, p)) if t <= now => {
                        *c += 1;
                        Some((t, p))
                    }
                    _ => None,
                };
                let mut inbox = node.take_pending();
                inbox.extend(network.receive(id));
                (odo, per_robot.remove(&id).unwrap_or_default(), inbox)
            })
            .collect();
        let start = Instant::now();
        let outboxes = tick_all(&mut nodes, now, inputs, cfg.parallel);
        timings.tick.push(start.elapsed().as_secs_f64() * 1e3);
        for m in outboxes.into_iter().flatten() {
            network.send(m);
        }
        if now + 1e-9 >= next_round {
            while next_round <= now + 1e-9 {
                next_round += period;
            }
            for node in nodes.iter_mut() {
                node.prepare_dpgo();
            }
            let start = Instant::now();
            let status = dpgo_round(&mut nodes, &mut network, now, &pos, &cfg.dpgo);
            timings.dpgo_round.push(start.elapsed().as_secs_f64() * 1e3);
            rounds += 1;
            converged = status.converged;
            cost_trace.push(CostSample {
                round: rounds,
                t: now,
                cost: global_cost(&nodes),
                max_step: status.max_step,
                complete: status.complete,
            });
        }
        last_positions = pos;
    }

    let end = stamps.last().copied().unwrap_or(0.0);
    let online_comm = network.account().clone();
    if cfg.closures {
        for node in nodes.iter_mut() {
            let pending = node.take_pending();
            let inbox: Vec<Message> = pending.into_iter().chain(network.receive(node.id())).collect();
            node.tick(end, None, &[], inbox);
            node.prepare_dpgo();
        }
        for _ in 0..cfg.final_rounds {
            let start = Instant::now();
            let status = dpgo_round(&mut nodes, &mut network, end, &last_positions, &cfg.dpgo);
            timings.dpgo_round.push(start.elapsed().as_secs_f64() * 1e3);
            rounds += 1;
            converged = status.converged;
            cost_trace.push(CostSample {
                round: rounds,
                t: end,
                cost: global_cost(&nodes),
                max_step: status.max_step,
                complete: status.complete,
            });
            if converged {
                break;
            }
        }
    }

    for node in &nodes {
        timings.estimation.extend(&node.timings().estimation);
        timings.pcm.extend(&node.timings().pcm);
    }
    let snapshots: Vec<NodeSnapshot> = nodes.iter().map(RobotNode::snapshot).collect();
    let mut closures: Vec<ClosureRecord> = nodes.iter().flat_map(|n| n.owned_closures().copied()).collect();
    closures.sort_by_key(|c| c.id);
    let inliers: BTreeSet<u64> = nodes
        .iter()
        .flat_map(|n| {
            let owned: BTreeSet<u64> = n.owned_closures().map(|c| c.id).collect();
            n.inlier_ids().into_iter().filter(move |id| owned.contains(id))
        })
        .collect();
    Ok(PipelineOutput {
        trajectories: snapshots.iter().map(|s| (s.robot, s.trajectory.clone())).collect(),
        closures,
        inliers,
        cost_trace,
        rounds,
        converged,
        comm: network.account().clone(),
        online_comm,
        timings,
        snapshots,
    })
}
