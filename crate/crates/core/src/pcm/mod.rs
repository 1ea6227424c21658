//! Pairwise consistency maximization over inter-robot loop closures.
//!
//! Two closures between the same robot pair are consistent when the cycle
//! they form with both robots' odometry composes to (nearly) the identity.
//! The inliers are the largest mutually consistent set, a maximum clique of
//! the consistency graph.

mod clique;

pub use clique::{max_clique_exact, max_clique_incremental, Adjacency};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimation::LoopClosure;
use crate::geometry::{chi2_quantile, mahalanobis, Covariance3, GeometryError, Pose2};
use crate::scenario::RobotId;
use crate::trajectory::Trajectory;

/// Degrees of freedom of an SE(2) cycle residual.
pub const PCM_DOF: u32 = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PcmError {
    #[error("closures connect different robot pairs: {0}->{1} vs {2}->{3}")]
    PairMismatch(RobotId, RobotId, RobotId, RobotId),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcmConfig {
    /// Significance level ε of the chi-squared gate.
    pub epsilon: f64,
    /// Translational sigma of the cycle covariance (m).
    pub sigma_t: f64,
    /// Rotational sigma of the cycle covariance (rad).
    pub sigma_theta: f64,
    /// Largest graph handed to the exact clique solver.
    pub exact_cap: usize,
}

impl Default for PcmConfig {
    fn default() -> Self {
        // a cycle carries two closures, so twice the default closure covariance
        Self {
            epsilon: 0.5,
            sigma_t: 0.5 * std::f64::consts::SQRT_2,
            sigma_theta: 0.15 * std::f64::consts::SQRT_2,
            exact_cap: 60,
        }
    }
}

impl PcmConfig {
    pub fn sigma(&self) -> Result<Covariance3, GeometryError> {
        Covariance3::from_sigmas(self.sigma_t, self.sigma_theta)
    }

    pub fn threshold(&self) -> Result<f64, GeometryError> {
        chi2_quantile(self.epsilon, PCM_DOF)
    }

    pub fn gate(&self) -> Result<Gate, GeometryError> {
        Ok(Gate {
            sigma: self.sigma()?,
            threshold: self.threshold()?,
        })
    }
}

/// A ready-to-use chi-squared gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gate {
    pub sigma: Covariance3,
    pub threshold: f64,
}

/// Cycle `odom_α(k→i) ⊕ lc_i ⊕ odom_β(i→k) ⊖ lc_k`, the identity for
/// perfectly consistent measurements.
pub fn cycle_residual(lc_k: &Pose2, lc_i: &Pose2, odom_alpha_ki: &Pose2, odom_beta_ik: &Pose2) -> Pose2 {
    odom_alpha_ki
        .compose(lc_i)
        .compose(odom_beta_ik)
        .compose(&lc_k.inverse())
}

/// Squared Mahalanobis norm of the cycle residual.
pub fn cycle_distance_sq(
    lc_k: &LoopClosure,
    lc_i: &LoopClosure,
    odom_alpha_ki: &Pose2,
    odom_beta_ik: &Pose2,
    sigma: &Covariance3,
) -> Result<f64, PcmError> {
    if (lc_k.from, lc_k.to) != (lc_i.from, lc_i.to) {
        return Err(PcmError::PairMismatch(lc_k.from, lc_k.to, lc_i.from, lc_i.to));
    }
    let e = cycle_residual(&lc_k.relative_pose, &lc_i.relative_pose, odom_alpha_ki, odom_beta_ik);
    Ok(mahalanobis(&e.to_vector(), sigma.matrix())?.powi(2))
}

/// Squared-form chi-squared test on the cycle of two closures.
pub fn pairwise_consistent(
    lc_k: &LoopClosure,
    lc_i: &LoopClosure,
    odom_alpha_ki: &Pose2,
    odom_beta_ik: &Pose2,
    cfg: &PcmConfig,
) -> Result<bool, PcmError> {
    let gate = cfg.gate()?;
    Ok(cycle_distance_sq(lc_k, lc_i, odom_alpha_ki, odom_beta_ik, &gate.sigma)? <= gate.threshold)
}

/// Read access to stored odometry, by robot and time.
pub trait OdometryAccess {
    fn odometry_pose(&self, robot: RobotId, t: f64) -> Option<Pose2>;

    /// Pose at `to` in the frame of the pose at `from`.
    fn odometry_between(&self, robot: RobotId, from: f64, to: f64) -> Option<Pose2> {
        Some(self.odometry_pose(robot, from)?.between(&self.odometry_pose(robot, to)?))
    }
}

/// Trajectories looked up by nearest sample within a tolerance.
#[derive(Debug, Clone, Copy)]
pub struct NearestOdometry<'a> {
    pub trajectories: &'a BTreeMap<RobotId, Trajectory>,
    pub tolerance: f64,
}

impl OdometryAccess for NearestOdometry<'_> {
    fn odometry_pose(&self, robot: RobotId, t: f64) -> Option<Pose2> {
        self.trajectories.get(&robot)?.nearest(t, self.tolerance)
    }
}

/// Verdict for two closures of one pair given odometry lookups.
/// Missing odometry counts as inconsistent.
pub fn closures_consistent(
    a: &LoopClosure,
    b: &LoopClosure,
    odom: &dyn OdometryAccess,
    gate: &Gate,
) -> Result<bool, PcmError> {
    let (Some(alpha_ab), Some(beta_ba)) = (
        odom.odometry_between(a.from, a.t, b.t),
        odom.odometry_between(a.to, b.t, a.t),
    ) else {
        return Ok(false);
    };
    Ok(cycle_distance_sq(a, b, &alpha_ab, &beta_ba, &gate.sigma)? <= gate.threshold)
}

/// Consistency graph over the closures of one ordered robot pair, in
/// arrival order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyGraph {
    pub from: RobotId,
    pub to: RobotId,
    closures: Vec<LoopClosure>,
    adjacency: Adjacency,
    clique: Vec<usize>,
}

impl ConsistencyGraph {
    pub fn new(from: RobotId, to: RobotId) -> Self {
        Self {
            from,
            to,
            closures: Vec::new(),
            adjacency: Adjacency::new(0),
            clique: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.closures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.closures.is_empty()
    }

    pub fn closures(&self) -> &[LoopClosure] {
        &self.closures
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    /// Add one closure, computing only its row of the adjacency matrix.
    pub fn add(&mut self, lc: LoopClosure, odom: &dyn OdometryAccess, gate: &Gate) -> Result<(), PcmError> {
        if (lc.from, lc.to) != (self.from, self.to) {
            return Err(PcmError::PairMismatch(self.from, self.to, lc.from, lc.to));
        }
        let row = self
            .closures
            .iter()
            .map(|other| closures_consistent(other, &lc, odom, gate))
            .collect::<Result<Vec<bool>, _>>()?;
        self.adjacency.push(&row);
        self.closures.push(lc);
        Ok(())
    }

    /// Recompute the inlier clique: exact up to `exact_cap` nodes, the
    /// incremental heuristic seeded with the previous clique above it.
    pub fn solve(&mut self, exact_cap: usize) -> &[usize] {
        self.clique = if self.len() <= exact_cap {
            max_clique_exact(&self.adjacency)
        } else {
            max_clique_incremental(&self.adjacency, &self.clique)
        };
        &self.clique
    }

    pub fn clique(&self) -> &[usize] {
        &self.clique
    }

    pub fn inliers(&self) -> Vec<LoopClosure> {
        self.clique.iter().map(|&i| self.closures[i]).collect()
    }
}

/// Run PCM independently for every ordered robot pair and return the union
/// of the inlier sets, ordered by pair and then by arrival.
pub fn filter_inliers(
    closures: &[LoopClosure],
    odom: &dyn OdometryAccess,
    cfg: &PcmConfig,
) -> Result<Vec<LoopClosure>, PcmError> {
    let gate = cfg.gate()?;
    let mut graphs: BTreeMap<(RobotId, RobotId), ConsistencyGraph> = BTreeMap::new();
    for lc in closures {
        let graph = graphs
            .entry((lc.from, lc.to))
            .or_insert_with(|| ConsistencyGraph::new(lc.from, lc.to));
        graph.add(*lc, odom, &gate)?;
        if graph.len() > cfg.exact_cap {
            graph.solve(cfg.exact_cap);
        }
    }
    Ok(graphs
        .values_mut()
        .flat_map(|g| {
            g.solve(cfg.exact_cap);
            g.inliers()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::LoopClosure;

    fn closure(t: f64, pose: Pose2) -> LoopClosure {
        LoopClosure {
            from: RobotId(0),
            to: RobotId(1),
            t,
            relative_pose: pose,
            covariance: Covariance3::from_sigmas(0.5, 0.15).unwrap(),
            residual: 0.0,
            window_size: 50,
            coarse_pose: pose,
            converged: true,
        }
    }

    /// Two robots on known paths; closures derived from truth.
    fn world() -> BTreeMap<RobotId, Trajectory> {
        let a = Trajectory::from_samples((0..100).map(|k| {
            let t = k as f64 * 0.1;
            (t, Pose2::new(t, 0.2 * t * t, 0.3 * t))
        }))
        .unwrap();
        let b = Trajectory::from_samples((0..100).map(|k| {
            let t = k as f64 * 0.1;
            (t, Pose2::new(5.0 - 0.5 * t, 2.0 + t, -0.2 * t))
        }))
        .unwrap();
        BTreeMap::from([(RobotId(0), a), (RobotId(1), b)])
    }

    fn true_closure(w: &BTreeMap<RobotId, Trajectory>, t: f64) -> LoopClosure {
        let rel = w[&RobotId(0)].pose_at(t).unwrap().between(&w[&RobotId(1)].pose_at(t).unwrap());
        closure(t, rel)
    }

    #[test]
    fn noiseless_cycles_are_identity() {
        let w = world();
        let odom = NearestOdometry {
            trajectories: &w,
            tolerance: 0.05,
        };
        let a = true_closure(&w, 1.0);
        let b = true_closure(&w, 7.5);
        for eps in [0.01, 0.5, 0.99] {
            let gate = PcmConfig { epsilon: eps, ..PcmConfig::default() }.gate().unwrap();
            assert!(closures_consistent(&a, &b, &odom, &gate).unwrap());
        }
        let e = cycle_residual(
            &a.relative_pose,
            &b.relative_pose,
            &odom.odometry_between(RobotId(0), 1.0, 7.5).unwrap(),
            &odom.odometry_between(RobotId(1), 7.5, 1.0).unwrap(),
        );
        assert!(e.to_vector().norm() < 1e-12);
    }

    #[test]
    fn translated_closure_is_rejected() {
        let lc = closure(0.0, Pose2::identity());
        let moved = closure(1.0, Pose2::new(10.0, 0.0, 0.0));
        let cfg = PcmConfig {
            epsilon: 0.05,
            sigma_t: 0.5,
            sigma_theta: 0.02f64.sqrt(),
            ..PcmConfig::default()
        };
        let sigma = cfg.sigma().unwrap();
        let d2 = cycle_distance_sq(&lc, &moved, &Pose2::identity(), &Pose2::identity(), &sigma).unwrap();
        assert!((d2 - 400.0).abs() < 1e-9);
        assert!(!pairwise_consistent(&lc, &moved, &Pose2::identity(), &Pose2::identity(), &cfg).unwrap());
    }

    #[test]
    fn mismatched_pairs_are_an_error() {
        let a = closure(0.0, Pose2::identity());
        let mut b = closure(1.0, Pose2::identity());
        b.to = RobotId(2);
        let err = pairwise_consistent(&a, &b, &Pose2::identity(), &Pose2::identity(), &PcmConfig::default());
        assert!(matches!(err, Err(PcmError::PairMismatch(..))));
    }

    #[test]
    fn single_closure_graph() {
        let w = world();
        let odom = NearestOdometry {
            trajectories: &w,
            tolerance: 0.05,
        };
        let mut g = ConsistencyGraph::new(RobotId(0), RobotId(1));
        g.add(true_closure(&w, 2.0), &odom, &PcmConfig::default().gate().unwrap())
            .unwrap();
        assert_eq!(g.solve(60), &[0]);
    }

    #[test]
    fn duplicate_inlier_is_consistent_with_inliers() {
        let w = world();
        let odom = NearestOdometry {
            trajectories: &w,
            tolerance: 0.05,
        };
        let gate = PcmConfig::default().gate().unwrap();
        let mut g = ConsistencyGraph::new(RobotId(0), RobotId(1));
        for t in [1.0, 2.0, 3.0] {
            g.add(true_closure(&w, t), &odom, &gate).unwrap();
        }
        g.add(closure(4.0, Pose2::new(9.0, 9.0, 2.0)), &odom, &gate).unwrap();
        g.add(true_closure(&w, 2.0), &odom, &gate).unwrap();
        let adj = g.adjacency();
        assert!([0, 1, 2].iter().all(|&j| adj.get(4, j)));
        assert_eq!(g.solve(60), &[0, 1, 2, 4]);
    }

    #[test]
    fn filter_handles_empty_and_outliers() {
        let w = world();
        let odom = NearestOdometry {
            trajectories: &w,
            tolerance: 0.05,
        };
        assert!(filter_inliers(&[], &odom, &PcmConfig::default()).unwrap().is_empty());
        let mut closures: Vec<LoopClosure> = (1..9).map(|k| true_closure(&w, k as f64)).collect();
        closures.insert(3, closure(3.5, Pose2::new(-4.0, 6.0, 1.0)));
        let inliers = filter_inliers(&closures, &odom, &PcmConfig::default()).unwrap();
        assert_eq!(inliers.len(), 8);
        assert!(inliers.iter().all(|lc| lc.t != 3.5));
    }
}
