//! Relative pose between two robots from a window of UWB ranges and both
//! robots' odometry: coarse polar grid search followed by nonlinear least
//! squares.

mod landscape;

pub use landscape::{local_minima, residual_grid, GridCell, ResidualGrid};

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Covariance3, GeometryError, Pose2};
use crate::scenario::RobotId;
use crate::trajectory::Trajectory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("ranging window is empty")]
    EmptyWindow,
    #[error("window holds {len} samples, need at least {min}")]
    InsufficientWindow { len: usize, min: usize },
    #[error("insufficient excitation: robots travelled {alpha:.3} m and {beta:.3} m, need {min:.3} m")]
    Degenerate { alpha: f64, beta: f64, min: f64 },
    #[error("angular step must lie in (0, π], got {0}")]
    InvalidDelta(f64),
    #[error("window entries must be ordered in time")]
    Unordered,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// One ranging sample with both robots' odometry re-expressed relative to
/// the window end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowEntry {
    pub t: f64,
    /// Pose of α at this sample in α's frame at the window end.
    pub rel_alpha: Pose2,
    /// Pose of β at this sample in β's frame at the window end.
    pub rel_beta: Pose2,
    pub range: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangingWindow {
    pub alpha: RobotId,
    pub beta: RobotId,
    entries: Vec<WindowEntry>,
}

impl RangingWindow {
    pub fn new(alpha: RobotId, beta: RobotId, entries: Vec<WindowEntry>) -> Result<Self, EstimationError> {
        if entries.is_empty() {
            return Err(EstimationError::EmptyWindow);
        }
        if entries.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(EstimationError::Unordered);
        }
        Ok(Self { alpha, beta, entries })
    }

    /// Build a window from absolute odometry streams of both robots and the
    /// time-ordered ranges measured by α about β. The window takes the last
    /// `tau` ranging samples at or before `end` that both odometry streams
    /// cover.
    pub fn from_streams(
        alpha: RobotId,
        beta: RobotId,
        odom_alpha: &Trajectory,
        odom_beta: &Trajectory,
        ranges: &[(f64, f64)],
        tau: usize,
        end: f64,
    ) -> Result<Self, EstimationError> {
        let upto = ranges.partition_point(|&(t, _)| t <= end);
        let usable: Vec<(f64, f64)> = ranges[..upto]
            .iter()
            .rev()
            .filter(|&&(t, _)| odom_alpha.covers(t) && odom_beta.covers(t))
            .take(tau)
            .copied()
            .collect();
        let &(t_end, _) = usable.first().ok_or(EstimationError::EmptyWindow)?;
        let end_alpha = odom_alpha.pose_at(t_end).expect("covered");
        let end_beta = odom_beta.pose_at(t_end).expect("covered");
        let entries = usable
            .iter()
            .rev()
            .map(|&(t, range)| WindowEntry {
                t,
                rel_alpha: end_alpha.between(&odom_alpha.pose_at(t).expect("covered")),
                rel_beta: end_beta.between(&odom_beta.pose_at(t).expect("covered")),
                range,
            })
            .collect();
        Self::new(alpha, beta, entries)
    }

    pub fn entries(&self) -> &[WindowEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn end_time(&self) -> f64 {
        self.entries.last().expect("non-empty").t
    }

    pub fn latest_range(&self) -> f64 {
        self.entries.last().expect("non-empty").range
    }

    pub fn median_range(&self) -> f64 {
        let mut r: Vec<f64> = self.entries.iter().map(|e| e.range).collect();
        r.sort_by(f64::total_cmp);
        let n = r.len();
        if n % 2 == 1 {
            r[n / 2]
        } else {
            0.5 * (r[n / 2 - 1] + r[n / 2])
        }
    }

    /// Distance travelled by each robot within the window.
    pub fn excitation(&self) -> (f64, f64) {
        self.entries.windows(2).fold((0.0, 0.0), |(a, b), w| {
            (
                a + w[0].rel_alpha.translation_distance(&w[1].rel_alpha),
                b + w[0].rel_beta.translation_distance(&w[1].rel_beta),
            )
        })
    }

    /// The same window reflected across the x-axis.
    pub fn mirrored(&self) -> RangingWindow {
        RangingWindow {
            alpha: self.alpha,
            beta: self.beta,
            entries: self
                .entries
                .iter()
                .map(|e| WindowEntry {
                    rel_alpha: e.rel_alpha.mirrored(),
                    rel_beta: e.rel_beta.mirrored(),
                    ..*e
                })
                .collect(),
        }
    }
}

#[inline]
fn entry_error(c: (f64, f64), sin_cos: (f64, f64), e: &WindowEntry) -> f64 {
    let (s, co) = sin_cos;
    let bx = c.0 + co * e.rel_beta.x - s * e.rel_beta.y;
    let by = c.1 + s * e.rel_beta.x + co * e.rel_beta.y;
    e.range - (e.rel_alpha.x - bx).hypot(e.rel_alpha.y - by)
}

/// Sum of squared ranging errors for β at `candidate` in α's frame.
pub fn residual(candidate: &Pose2, window: &RangingWindow) -> Result<f64, EstimationError> {
    if window.is_empty() {
        return Err(EstimationError::EmptyWindow);
    }
    let sc = candidate.theta.sin_cos();
    Ok(window
        .entries
        .iter()
        .map(|e| entry_error((candidate.x, candidate.y), sc, e).powi(2))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusMode {
    /// Circle radius from the ranging sample at the window end.
    Latest,
    /// Circle radius from the median ranging in the window.
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Angular grid step (rad).
    pub delta: f64,
    pub radius: RadiusMode,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            radius: RadiusMode::Latest,
        }
    }
}

impl SearchConfig {
    pub fn with_delta(delta: f64) -> Self {
        Self {
            delta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EstimationError> {
        if self.delta > 0.0 && self.delta <= PI {
            Ok(())
        } else {
            Err(EstimationError::InvalidDelta(self.delta))
        }
    }

    /// Number of steps on each side of zero, ⌈π/δ⌉.
    pub fn steps(&self) -> i64 {
        (PI / self.delta).ceil() as i64
    }

    pub fn candidate_count(&self) -> usize {
        let side = 2 * self.steps() as usize + 1;
        side * side
    }

    pub fn radius(&self, window: &RangingWindow) -> f64 {
        match self.radius {
            RadiusMode::Latest => window.latest_range(),
            RadiusMode::Median => window.median_range(),
        }
    }

    pub fn candidate(&self, radius: f64, i_phi: i64, i_theta: i64) -> Pose2 {
        let phi = self.delta * i_phi as f64;
        Pose2::new(radius * phi.cos(), radius * phi.sin(), self.delta * i_theta as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseResult {
    pub pose: Pose2,
    pub residual: f64,
    pub i_phi: i64,
    pub i_theta: i64,
    /// Candidates visited, including those abandoned early.
    pub candidates: usize,
    /// Window entries evaluated in total.
    pub evaluations: usize,
}

/// Polar grid search with early abort. Candidates are visited with φ in the
/// outer loop and θ in the inner loop; a candidate replaces the incumbent
/// only if its residual is strictly smaller, so the earliest minimum wins.
pub fn coarse_search(window: &RangingWindow, cfg: &SearchConfig) -> Result<CoarseResult, EstimationError> {
    cfg.validate()?;
    if window.is_empty() {
        return Err(EstimationError::EmptyWindow);
    }
    let w = cfg.steps();
    let radius = cfg.radius(window);
    let thetas: Vec<(f64, f64)> = (-w..=w).map(|i| (cfg.delta * i as f64).sin_cos()).collect();
    let mut best = f64::INFINITY;
    let mut best_idx = (0, 0);
    let mut candidates = 0;
    let mut evaluations = 0;
    for i_phi in -w..=w {
        let phi = cfg.delta * i_phi as f64;
        let c = (radius * phi.cos(), radius * phi.sin());
        for (k, &sc) in thetas.iter().enumerate() {
            candidates += 1;
            let mut r = 0.0;
            for e in &window.entries {
                evaluations += 1;
                r += entry_error(c, sc, e).powi(2);
                if r >= best {
                    break;
                }
            }
            if r < best {
                best = r;
                best_idx = (i_phi, k as i64 - w);
            }
        }
    }
    Ok(CoarseResult {
        pose: cfg.candidate(radius, best_idx.0, best_idx.1),
        residual: best,
        i_phi: best_idx.0,
        i_theta: best_idx.1,
        candidates,
        evaluations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub cost_tolerance: f64,
    pub initial_lambda: f64,
    /// Huber threshold (m); plain least squares when absent.
    pub huber: Option<f64>,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            step_tolerance: 1e-8,
            cost_tolerance: 1e-10,
            initial_lambda: 1e-3,
            huber: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineResult {
    pub pose: Pose2,
    /// Objective at `pose`: Σe² for plain least squares, the Huber sum otherwise.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn robust_cost(window: &RangingWindow, pose: &Pose2, huber: Option<f64>) -> f64 {
    let sc = pose.theta.sin_cos();
    window
        .entries
        .iter()
        .map(|e| {
            let err = entry_error((pose.x, pose.y), sc, e);
            match huber {
                Some(k) if err.abs() > k => 2.0 * k * err.abs() - k * k,
                _ => err * err,
            }
        })
        .sum()
}

/// Levenberg-Marquardt on (x, y, θ). Only cost-decreasing steps are taken,
/// so the returned cost never exceeds the cost at `initial`.
pub fn refine(initial: &Pose2, window: &RangingWindow, cfg: &RefineConfig) -> RefineResult {
    let mut pose = *initial;
    let mut cost = robust_cost(window, &pose, cfg.huber);
    let mut lambda = cfg.initial_lambda;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        if cost == 0.0 {
            converged = true;
            break;
        }
        iterations += 1;
        let (s, c) = pose.theta.sin_cos();
        let mut h = Matrix3::zeros();
        let mut g = Vector3::zeros();
        for e in &window.entries {
            let bx = pose.x + c * e.rel_beta.x - s * e.rel_beta.y;
            let by = pose.y + s * e.rel_beta.x + c * e.rel_beta.y;
            let dx = e.rel_alpha.x - bx;
            let dy = e.rel_alpha.y - by;
            let n = dx.hypot(dy);
            if n == 0.0 {
                continue;
            }
            let err = e.range - n;
            let (ux, uy) = (dx / n, dy / n);
            let dpx = -s * e.rel_beta.x - c * e.rel_beta.y;
            let dpy = c * e.rel_beta.x - s * e.rel_beta.y;
            let j = Vector3::new(ux, uy, ux * dpx + uy * dpy);
            let weight = match cfg.huber {
                Some(k) if err.abs() > k => k / err.abs(),
                _ => 1.0,
            };
            h += weight * j * j.transpose();
            g += weight * j * err;
        }
        // minimize Σ w e², with e linearized as e + J·step
        let mut accepted = false;
        while lambda < 1e12 {
            let mut damped = h;
            for k in 0..3 {
                damped[(k, k)] += lambda * h[(k, k)].max(1e-9);
            }
            let Some(step) = damped.cholesky().map(|ch| ch.solve(&(-g))) else {
                lambda *= 10.0;
                continue;
            };
            if step.norm() < cfg.step_tolerance {
                converged = true;
                break;
            }
            let trial = Pose2::new(pose.x + step[0], pose.y + step[1], pose.theta + step[2]);
            let trial_cost = robust_cost(window, &trial, cfg.huber);
            if trial_cost < cost {
                let rel = (cost - trial_cost) / cost;
                pose = trial;
                cost = trial_cost;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if rel < cfg.cost_tolerance {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if converged {
            break;
        }
        if !accepted {
            // no decreasing step at any damping: a stationary point
            converged = true;
            break;
        }
    }
    RefineResult {
        pose,
        cost,
        iterations,
        converged,
    }
}

/// Unit of the window size τ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauUnit {
    Samples,
    Seconds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub tau: f64,
    pub tau_unit: TauUnit,
    pub search: SearchConfig,
    pub refine: RefineConfig,
    /// Smallest usable window (samples).
    pub min_window: usize,
    /// Distance each robot must travel inside the window (m).
    pub min_excitation: f64,
    /// Closure covariance translational sigma (m).
    pub sigma_t: f64,
    /// Closure covariance rotational sigma (rad).
    pub sigma_theta: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            tau: 50.0,
            tau_unit: TauUnit::Seconds,
            search: SearchConfig::default(),
            refine: RefineConfig::default(),
            min_window: 10,
            min_excitation: 0.2,
            sigma_t: 0.5,
            sigma_theta: 0.15,
        }
    }
}

impl EstimatorConfig {
    /// Window size in samples at the given ranging rate.
    pub fn window_samples(&self, uwb_rate: f64) -> usize {
        match self.tau_unit {
            TauUnit::Samples => self.tau.round().max(1.0) as usize,
            TauUnit::Seconds => (self.tau * uwb_rate).round().max(1.0) as usize,
        }
    }

    pub fn covariance(&self) -> Result<Covariance3, GeometryError> {
        Covariance3::from_sigmas(self.sigma_t, self.sigma_theta)
    }
}

/// An estimated pose of `to` in the frame of `from` at time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopClosure {
    pub from: RobotId,
    pub to: RobotId,
    pub t: f64,
    pub relative_pose: Pose2,
    pub covariance: Covariance3,
    /// Σe² at `relative_pose` (m²).
    pub residual: f64,
    pub window_size: usize,
    pub coarse_pose: Pose2,
    pub converged: bool,
}

/// Check the window is long and excited enough to estimate from.
pub fn check_window(window: &RangingWindow, cfg: &EstimatorConfig) -> Result<(), EstimationError> {
    if window.len() < cfg.min_window.max(1) {
        return Err(EstimationError::InsufficientWindow {
            len: window.len(),
            min: cfg.min_window.max(1),
        });
    }
    let (a, b) = window.excitation();
    // a pair at rest leaves the residual rotationally symmetric
    if a < cfg.min_excitation || b < cfg.min_excitation || (a == 0.0 && b == 0.0) {
        return Err(EstimationError::Degenerate {
            alpha: a,
            beta: b,
            min: cfg.min_excitation,
        });
    }
    Ok(())
}

/// Coarse search followed by refinement.
pub fn estimate_relative_pose(
    window: &RangingWindow,
    cfg: &EstimatorConfig,
) -> Result<LoopClosure, EstimationError> {
    check_window(window, cfg)?;
    let coarse = coarse_search(window, &cfg.search)?;
    let refined = refine(&coarse.pose, window, &cfg.refine);
    Ok(LoopClosure {
        from: window.alpha,
        to: window.beta,
        t: window.end_time(),
        relative_pose: refined.pose,
        covariance: cfg.covariance()?,
        residual: residual(&refined.pose, window)?,
        window_size: window.len(),
        coarse_pose: coarse.pose,
        converged: refined.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn arc(start: Pose2, step: Pose2, n: usize) -> Vec<Pose2> {
        let mut poses = vec![start];
        for _ in 1..n {
            let last = *poses.last().unwrap();
            poses.push(last.compose(&step));
        }
        poses
    }

    /// α and β drive arcs of different curvature; β starts at `start_rel`
    /// in α's starting frame.
    fn scene(start_rel: Pose2, n: usize) -> (Vec<Pose2>, Vec<Pose2>) {
        let a = arc(Pose2::identity(), Pose2::new(0.05, 0.0, 0.04), n);
        let b = arc(start_rel, Pose2::new(0.04, 0.0, -0.05), n);
        (a, b)
    }

    fn synthetic(start_rel: Pose2, n: usize) -> RangingWindow {
        let (a, b) = scene(start_rel, n);
        let entries = (0..n)
            .map(|k| WindowEntry {
                t: k as f64,
                rel_alpha: a[n - 1].between(&a[k]),
                rel_beta: b[n - 1].between(&b[k]),
                range: a[k].translation_distance(&b[k]),
            })
            .collect();
        RangingWindow::new(RobotId(0), RobotId(1), entries).unwrap()
    }

    fn truth_of(start_rel: Pose2, n: usize) -> Pose2 {
        let (a, b) = scene(start_rel, n);
        a[n - 1].between(&b[n - 1])
    }

    #[test]
    fn residual_vanishes_at_truth() {
        let w = synthetic(Pose2::new(3.0, 1.0, 0.4), 30);
        let truth = truth_of(Pose2::new(3.0, 1.0, 0.4), 30);
        assert!(residual(&truth, &w).unwrap() < 1e-9);
    }

    #[test]
    fn single_entry_circle_constraint() {
        let e = WindowEntry {
            t: 0.0,
            rel_alpha: Pose2::identity(),
            rel_beta: Pose2::identity(),
            range: 2.0,
        };
        let w = RangingWindow::new(RobotId(0), RobotId(1), vec![e]).unwrap();
        let r = residual(&Pose2::new(2.0 * 0.3f64.cos(), 2.0 * 0.3f64.sin(), 1.0), &w).unwrap();
        assert!(r < 1e-24);
    }

    #[test]
    fn empty_window_is_rejected() {
        assert_eq!(
            RangingWindow::new(RobotId(0), RobotId(1), vec![]),
            Err(EstimationError::EmptyWindow)
        );
    }

    #[test]
    fn candidate_count_matches_grid() {
        let cfg = SearchConfig::with_delta(0.1);
        assert_eq!(cfg.steps(), 32);
        assert_eq!(cfg.candidate_count(), 4225);
        let w = synthetic(Pose2::new(3.0, 1.0, 0.4), 20);
        assert_eq!(coarse_search(&w, &cfg).unwrap().candidates, 4225);
        assert!(SearchConfig::with_delta(0.0).validate().is_err());
        assert!(SearchConfig::with_delta(4.0).validate().is_err());
    }

    #[test]
    fn coarse_then_refine_recovers_truth() {
        let rel = Pose2::new(-2.0, 2.5, 2.0);
        let w = synthetic(rel, 50);
        let truth = truth_of(rel, 50);
        let cfg = SearchConfig::with_delta(0.1);
        let coarse = coarse_search(&w, &cfg).unwrap();
        let r = w.latest_range();
        assert!(coarse.pose.translation_distance(&truth) <= 0.1 * r + 1e-9);
        assert!(coarse.pose.angle_distance(&truth) <= 0.1);
        let est = estimate_relative_pose(&w, &EstimatorConfig::default()).unwrap();
        assert!(est.relative_pose.translation_distance(&truth) < 1e-4);
        assert!(est.relative_pose.angle_distance(&truth) < 1e-4);
    }

    #[test]
    fn refine_keeps_optimum() {
        let rel = Pose2::new(1.0, -3.0, -FRAC_PI_2);
        let w = synthetic(rel, 40);
        let truth = truth_of(rel, 40);
        let exact = refine(&truth, &w, &RefineConfig::default());
        let polished = refine(&exact.pose, &w, &RefineConfig::default());
        assert_eq!(polished.pose, exact.pose);
        assert!(polished.converged);
    }

    #[test]
    fn stationary_pair_is_degenerate() {
        let entries = (0..20)
            .map(|k| WindowEntry {
                t: k as f64,
                rel_alpha: Pose2::identity(),
                rel_beta: Pose2::identity(),
                range: 3.0,
            })
            .collect();
        let w = RangingWindow::new(RobotId(0), RobotId(1), entries).unwrap();
        assert!(matches!(
            estimate_relative_pose(&w, &EstimatorConfig::default()),
            Err(EstimationError::Degenerate { .. })
        ));
    }

    #[test]
    fn short_window_is_insufficient() {
        let w = synthetic(Pose2::new(3.0, 1.0, 0.4), 5);
        assert!(matches!(
            estimate_relative_pose(&w, &EstimatorConfig::default()),
            Err(EstimationError::InsufficientWindow { len: 5, min: 10 })
        ));
    }

    #[test]
    fn tau_in_seconds_converts_by_rate() {
        let cfg = EstimatorConfig {
            tau: 2.0,
            tau_unit: TauUnit::Seconds,
            ..EstimatorConfig::default()
        };
        assert_eq!(cfg.window_samples(50.0), 100);
    }

    #[test]
    fn window_from_streams_ends_at_identity() {
        let a = Trajectory::from_samples((0..=20).map(|k| (k as f64 * 0.1, Pose2::new(k as f64 * 0.02, 0.0, 0.0)))).unwrap();
        let b = Trajectory::from_samples((0..=20).map(|k| (k as f64 * 0.1, Pose2::new(0.0, k as f64 * 0.02, 0.1)))).unwrap();
        let ranges: Vec<(f64, f64)> = (0..=100).map(|k| (k as f64 * 0.02, 1.0)).collect();
        let w = RangingWindow::from_streams(RobotId(0), RobotId(1), &a, &b, &ranges, 50, 1.5).unwrap();
        assert_eq!(w.len(), 50);
        assert_eq!(w.end_time(), 1.5);
        let last = w.entries().last().unwrap();
        assert_eq!(last.rel_alpha, Pose2::identity());
        assert_eq!(last.rel_beta, Pose2::identity());
        let first = w.entries()[0];
        assert!((first.t - 0.52).abs() < 1e-12);
        assert!((first.rel_alpha.x + 0.196).abs() < 1e-9);
    }
}
