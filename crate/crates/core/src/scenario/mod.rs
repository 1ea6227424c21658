//! Synthetic multi-robot scenarios: ground-truth paths, odometry and UWB
//! ranging with configurable noise.

mod dataset;

pub use dataset::{read_dataset, write_dataset, parse_dataset, format_dataset, DatasetError};

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, Pose2};
use crate::trajectory::Trajectory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("invalid scenario parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RobotId(pub u32);

impl fmt::Display for RobotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl RobotId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometrySample {
    pub t: f64,
    pub pose: Pose2,
}

/// A distance sample recorded by `from` about `to`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangingMeasurement {
    pub t: f64,
    pub from: RobotId,
    pub to: RobotId,
    pub distance: f64,
}

/// Per-robot trajectories in one common world frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub trajectories: BTreeMap<RobotId, Trajectory>,
}

impl GroundTruth {
    pub fn robots(&self) -> impl Iterator<Item = RobotId> + '_ {
        self.trajectories.keys().copied()
    }

    pub fn pose_at(&self, robot: RobotId, t: f64) -> Option<Pose2> {
        self.trajectories.get(&robot)?.pose_at(t)
    }

    /// Pose of `to` in the frame of `from` at time `t`.
    pub fn relative_pose(&self, from: RobotId, to: RobotId, t: f64) -> Option<Pose2> {
        Some(self.pose_at(from, t)?.between(&self.pose_at(to, t)?))
    }

    /// Apply the same rigid motion to every trajectory.
    pub fn transformed(&self, motion: &Pose2) -> GroundTruth {
        GroundTruth {
            trajectories: self
                .trajectories
                .iter()
                .map(|(&r, traj)| (r, traj.map_poses(|p| motion.compose(p))))
                .collect(),
        }
    }

    /// Express every trajectory relative to the first pose of the lowest robot id.
    pub fn anchored(&self) -> GroundTruth {
        let Some(origin) = self
            .trajectories
            .values()
            .next()
            .and_then(|t| t.get(0))
            .map(|(_, p)| p)
        else {
            return self.clone();
        };
        self.transformed(&origin.inverse())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Per-step translational odometry noise (m).
    pub odom_trans_sigma: f64,
    /// Per-step rotational odometry noise (rad).
    pub odom_rot_sigma: f64,
    pub uwb_sigma: f64,
    pub nlos_probability: f64,
    /// Mean of the positive exponential NLOS bias (m).
    pub nlos_bias_scale: f64,
    pub max_range: f64,
    pub uwb_rate: f64,
    pub odom_rate: f64,
    pub rng_seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            odom_trans_sigma: 0.001,
            odom_rot_sigma: 0.0005,
            uwb_sigma: 0.1,
            nlos_probability: 0.0,
            nlos_bias_scale: 0.3,
            max_range: 100.0,
            uwb_rate: 50.0,
            odom_rate: 10.0,
            rng_seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        Self {
            odom_trans_sigma: 0.0,
            odom_rot_sigma: 0.0,
            uwb_sigma: 0.0,
            nlos_probability: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let sigmas = [
            self.odom_trans_sigma,
            self.odom_rot_sigma,
            self.uwb_sigma,
            self.nlos_bias_scale,
        ];
        if sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(ScenarioError::InvalidParameter("noise sigmas must be >= 0".into()));
        }
        if !(self.uwb_rate > 0.0 && self.odom_rate > 0.0) {
            return Err(ScenarioError::InvalidParameter("sensor rates must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.nlos_probability) {
            return Err(ScenarioError::InvalidParameter(
                "nlos_probability must lie in [0, 1]".into(),
            ));
        }
        if !(self.max_range >= 0.0) {
            return Err(ScenarioError::InvalidParameter("max_range must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub robots: u32,
    /// Seconds.
    pub duration: f64,
    /// m/s.
    pub speed_limit: f64,
    pub arena_width: f64,
    pub arena_height: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            robots: 3,
            duration: 300.0,
            speed_limit: 0.2,
            arena_width: 10.0,
            arena_height: 12.0,
            seed: 42,
        }
    }
}

// Steering parameters of the weaving random-waypoint walker.
const MAX_TURN_RATE: f64 = 0.6;
const WEAVE_AMPLITUDE: f64 = 0.6;
const WAYPOINT_RADIUS: f64 = 0.3;
const WALL_MARGIN: f64 = 1.0;

/// Smooth random-waypoint paths inside the arena.
///
/// Each robot steers toward a random waypoint with a bounded turn rate while
/// weaving sinusoidally around the bearing, so short windows still carry
/// curvature. Speed never exceeds `speed_limit`. Poses are sampled at `rate` Hz.
pub fn generate_trajectories(cfg: &ScenarioConfig, rate: f64) -> Result<GroundTruth, ScenarioError> {
    if cfg.robots < 2 {
        return Err(ScenarioError::InvalidParameter("need at least two robots".into()));
    }
    if !(cfg.duration > 0.0) {
        return Err(ScenarioError::InvalidParameter("duration must be > 0".into()));
    }
    if !(cfg.arena_width > 0.0 && cfg.arena_height > 0.0) {
        return Err(ScenarioError::InvalidParameter("arena must have positive size".into()));
    }
    if !(cfg.speed_limit >= 0.0) || !(rate > 0.0) {
        return Err(ScenarioError::InvalidParameter(
            "speed limit must be >= 0 and truth rate > 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let margin_x = WALL_MARGIN.min(cfg.arena_width / 2.0);
    let margin_y = WALL_MARGIN.min(cfg.arena_height / 2.0);
    let random_point = |rng: &mut ChaCha8Rng| {
        (
            rng.random_range(margin_x..=cfg.arena_width - margin_x),
            rng.random_range(margin_y..=cfg.arena_height - margin_y),
        )
    };

    let steps = (cfg.duration * rate).floor() as usize;
    let dt = 1.0 / rate;
    let mut truth = GroundTruth::default();
    let mut starts: Vec<(f64, f64)> = Vec::new();
    for r in 0..cfg.robots {
        // keep starting points apart so the robots do not overlap
        let mut start = random_point(&mut rng);
        for _ in 0..100 {
            if starts
                .iter()
                .all(|s| (s.0 - start.0).hypot(s.1 - start.1) > 1.0)
            {
                break;
            }
            start = random_point(&mut rng);
        }
        starts.push(start);
        let (mut x, mut y) = start;
        let mut heading: f64 = rng.random_range(-PI..PI);
        let mut waypoint = random_point(&mut rng);
        let mut leg_speed = cfg.speed_limit * rng.random_range(0.6..=1.0);
        let weave_freq = rng.random_range(0.05..0.15);
        let weave_phase = rng.random_range(0.0..2.0 * PI);

        let mut traj = Trajectory::new();
        for k in 0..=steps {
            let t = k as f64 / rate;
            traj.push(t, Pose2::new(x, y, heading))
                .expect("grid times increase");
            if cfg.speed_limit == 0.0 {
                continue;
            }
            if (waypoint.0 - x).hypot(waypoint.1 - y) < WAYPOINT_RADIUS {
                waypoint = random_point(&mut rng);
                leg_speed = cfg.speed_limit * rng.random_range(0.6..=1.0);
            }
            let bearing = (waypoint.1 - y).atan2(waypoint.0 - x);
            let weave = WEAVE_AMPLITUDE * (2.0 * PI * weave_freq * t + weave_phase).sin();
            let err = wrap_angle(bearing + weave - heading);
            let turn = (2.0 * err).clamp(-MAX_TURN_RATE, MAX_TURN_RATE);
            // slow down while turning hard toward the goal
            let speed = leg_speed * (0.5 + 0.5 * wrap_angle(bearing - heading).cos()).max(0.25);
            x += speed.min(cfg.speed_limit) * heading.cos() * dt;
            y += speed.min(cfg.speed_limit) * heading.sin() * dt;
            heading = wrap_angle(heading + turn * dt);
        }
        truth.trajectories.insert(RobotId(r), traj);
    }
    Ok(truth)
}

fn sample_times(truth: &GroundTruth, rate: f64) -> Vec<f64> {
    let end = truth
        .trajectories
        .values()
        .filter_map(|t| t.last_time())
        .fold(f64::INFINITY, f64::min);
    let start = truth
        .trajectories
        .values()
        .filter_map(|t| t.first_time())
        .fold(f64::NEG_INFINITY, f64::max);
    if !end.is_finite() || !start.is_finite() {
        return Vec::new();
    }
    let first = (start * rate).ceil() as i64;
    let last = (end * rate + 1e-9).floor() as i64;
    (first..=last).map(|k| k as f64 / rate).collect()
}

fn noise(sigma: f64) -> Option<Normal<f64>> {
    (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"))
}

/// Integrate true relative motions with body-frame Gaussian perturbations.
/// Every robot's odometry starts at the identity of its private frame.
pub fn synthesize_odometry(
    truth: &GroundTruth,
    cfg: &NoiseConfig,
) -> BTreeMap<RobotId, Trajectory> {
    let times = sample_times(truth, cfg.odom_rate);
    let trans = noise(cfg.odom_trans_sigma);
    let rot = noise(cfg.odom_rot_sigma);
    let mut out = BTreeMap::new();
    for (&robot, traj) in &truth.trajectories {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x0D0_0000 ^ u64::from(robot.0) << 32);
        let mut odom = Trajectory::new();
        let mut current = Pose2::identity();
        let mut previous_truth: Option<Pose2> = None;
        for &t in &times {
            let Some(p) = traj.pose_at(t) else { continue };
            if let Some(prev) = previous_truth {
                let step = prev.between(&p);
                let mut dx = step.x;
                let mut dy = step.y;
                let mut dt = step.theta;
                if let Some(n) = &trans {
                    dx += n.sample(&mut rng);
                    dy += n.sample(&mut rng);
                }
                if let Some(n) = &rot {
                    dt += n.sample(&mut rng);
                }
                current = current.compose(&Pose2::new(dx, dy, dt));
            }
            previous_truth = Some(p);
            odom.push(t, current).expect("grid times increase");
        }
        out.insert(robot, odom);
    }
    out
}

/// UWB samples for every ordered robot pair within `max_range`.
pub fn synthesize_ranging(truth: &GroundTruth, cfg: &NoiseConfig) -> Vec<RangingMeasurement> {
    let times = sample_times(truth, cfg.uwb_rate);
    let gauss = noise(cfg.uwb_sigma);
    let bias = (cfg.nlos_bias_scale > 0.0).then(|| Exp::new(1.0 / cfg.nlos_bias_scale).expect("positive rate"));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x0057_B000);
    let robots: Vec<RobotId> = truth.robots().collect();
    let mut out = Vec::new();
    for &t in &times {
        for &a in &robots {
            for &b in &robots {
                if a == b {
                    continue;
                }
                let (Some(pa), Some(pb)) = (truth.pose_at(a, t), truth.pose_at(b, t)) else {
                    continue;
                };
                let d = pa.translation_distance(&pb);
                if d > cfg.max_range {
                    continue;
                }
                let mut meas = d;
                if let Some(n) = &gauss {
                    meas += n.sample(&mut rng);
                }
                if cfg.nlos_probability > 0.0 && rng.random::<f64>() < cfg.nlos_probability {
                    if let Some(e) = &bias {
                        meas += e.sample(&mut rng);
                    }
                }
                out.push(RangingMeasurement {
                    t,
                    from: a,
                    to: b,
                    distance: meas.max(0.0),
                });
            }
        }
    }
    out
}

/// Sensor streams with optional ground truth.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub odometry: BTreeMap<RobotId, Trajectory>,
    pub ranging: Vec<RangingMeasurement>,
    pub truth: Option<GroundTruth>,
}

impl Dataset {
    pub fn robots(&self) -> Vec<RobotId> {
        self.odometry.keys().copied().collect()
    }

    /// Ranging samples recorded by `from` about `to`, in time order.
    pub fn ranging_between(&self, from: RobotId, to: RobotId) -> Vec<(f64, f64)> {
        self.ranging
            .iter()
            .filter(|m| m.from == from && m.to == to)
            .map(|m| (m.t, m.distance))
            .collect()
    }

    pub fn end_time(&self) -> f64 {
        self.odometry
            .values()
            .filter_map(|t| t.last_time())
            .chain(self.ranging.iter().map(|m| m.t))
            .fold(0.0, f64::max)
    }
}

/// Generate truth on the ranging grid (which contains the odometry grid) and
/// synthesize both sensor streams from it.
pub fn generate_dataset(scenario: &ScenarioConfig, noise: &NoiseConfig) -> Result<Dataset, ScenarioError> {
    noise.validate()?;
    let truth = generate_trajectories(scenario, noise.uwb_rate.max(noise.odom_rate))?;
    Ok(Dataset {
        odometry: synthesize_odometry(&truth, noise),
        ranging: synthesize_ranging(&truth, noise),
        truth: Some(truth),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_arena() -> ScenarioConfig {
        ScenarioConfig::default()
    }

    #[test]
    fn paths_respect_speed_and_length() {
        let truth = generate_trajectories(&paper_arena(), 50.0).unwrap();
        assert_eq!(truth.trajectories.len(), 3);
        for traj in truth.trajectories.values() {
            let len = traj.path_length(0.0, 300.0);
            assert!(len <= 60.0 + 1e-9, "length {len}");
            assert!(len > 10.0);
            for w in traj.poses().windows(2) {
                let v = w[0].translation_distance(&w[1]) * 50.0;
                assert!(v <= 0.2 + 1e-9);
            }
            for p in traj.poses() {
                assert!(p.x >= 0.0 && p.x <= 10.0 && p.y >= 0.0 && p.y <= 12.0, "{p}");
            }
        }
    }

    #[test]
    fn zero_speed_is_stationary() {
        let cfg = ScenarioConfig {
            robots: 2,
            duration: 10.0,
            speed_limit: 0.0,
            ..paper_arena()
        };
        let truth = generate_trajectories(&cfg, 50.0).unwrap();
        for traj in truth.trajectories.values() {
            let first = traj.poses()[0];
            assert!(traj.poses().iter().all(|p| *p == first));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&paper_arena(), &NoiseConfig::default()).unwrap();
        let b = generate_dataset(&paper_arena(), &NoiseConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_parameters() {
        let bad = [
            ScenarioConfig { robots: 1, ..paper_arena() },
            ScenarioConfig { duration: 0.0, ..paper_arena() },
            ScenarioConfig { arena_width: -1.0, ..paper_arena() },
        ];
        for cfg in bad {
            assert!(generate_trajectories(&cfg, 50.0).is_err());
        }
        let noise = NoiseConfig { nlos_probability: 1.5, ..NoiseConfig::default() };
        assert!(noise.validate().is_err());
    }

    #[test]
    fn noiseless_odometry_matches_truth_increments() {
        let cfg = ScenarioConfig { duration: 60.0, ..paper_arena() };
        let truth = generate_trajectories(&cfg, 50.0).unwrap();
        let odom = synthesize_odometry(&truth, &NoiseConfig::noiseless());
        for (r, traj) in &odom {
            let gt = &truth.trajectories[r];
            for (i, j) in [(0usize, 10usize), (5, 300), (100, 599)] {
                let (ti, oi) = traj.get(i).unwrap();
                let (tj, oj) = traj.get(j).unwrap();
                let expected = gt.pose_at(ti).unwrap().between(&gt.pose_at(tj).unwrap());
                let got = oi.between(&oj);
                assert!(got.translation_distance(&expected) < 1e-9);
                assert!(got.angle_distance(&expected) < 1e-9);
            }
        }
    }

    #[test]
    fn noiseless_ranging_is_euclidean() {
        let cfg = ScenarioConfig { duration: 5.0, ..paper_arena() };
        let truth = generate_trajectories(&cfg, 50.0).unwrap();
        let meas = synthesize_ranging(&truth, &NoiseConfig::noiseless());
        assert_eq!(meas.len(), 6 * (5 * 50 + 1));
        for m in meas {
            let d = truth
                .pose_at(m.from, m.t)
                .unwrap()
                .translation_distance(&truth.pose_at(m.to, m.t).unwrap());
            assert_eq!(m.distance, d);
        }
    }

    #[test]
    fn out_of_range_pairs_are_silent() {
        let mut truth = GroundTruth::default();
        let a = Trajectory::from_samples([(0.0, Pose2::identity()), (1.0, Pose2::identity())]).unwrap();
        let b = Trajectory::from_samples([
            (0.0, Pose2::new(101.0, 0.0, 0.0)),
            (1.0, Pose2::new(101.0, 0.0, 0.0)),
        ])
        .unwrap();
        truth.trajectories.insert(RobotId(0), a);
        truth.trajectories.insert(RobotId(1), b);
        let meas = synthesize_ranging(&truth, &NoiseConfig::noiseless());
        assert!(meas.is_empty());
    }
}
