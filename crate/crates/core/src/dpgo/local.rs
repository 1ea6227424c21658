//! One robot's block update with every other robot held fixed.
//!
//! Loop edges only join different robots, so with the neighbours fixed the
//! normal equations of one robot are block tridiagonal along its odometry
//! chain and are solved in linear time by block elimination.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};

use super::{edge_error, edge_linearize, Edge, NodeKey, PoseGraph};
use crate::geometry::{wrap_angle, Pose2};
use crate::scenario::RobotId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalConfig {
    pub iterations: usize,
    pub initial_lambda: f64,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            initial_lambda: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LocalOutcome {
    /// Largest change of any own pose: max of translation norm and |Δθ|.
    pub step_norm: f64,
    pub cost_before: f64,
    pub cost_after: f64,
    pub iterations: usize,
    /// Loop edges skipped because the neighbour's pose was unknown.
    pub missing_separators: usize,
    /// Set when no damping made the normal equations solvable.
    pub singular: bool,
}

struct ChainLink {
    measurement: Pose2,
    information: Matrix3<f64>,
}

struct LoopTerm {
    own: usize,
    remote: Pose2,
    own_is_from: bool,
    measurement: Pose2,
    information: Matrix3<f64>,
}

struct Problem {
    chain: Vec<ChainLink>,
    loops: Vec<LoopTerm>,
    fixed: Option<usize>,
}

impl Problem {
    fn cost(&self, poses: &[Pose2]) -> f64 {
        let chain: f64 = self
            .chain
            .iter()
            .enumerate()
            .map(|(k, l)| {
                let e = edge_error(&poses[k], &poses[k + 1], &l.measurement);
                e.dot(&(l.information * e))
            })
            .sum();
        let loops: f64 = self
            .loops
            .iter()
            .map(|l| {
                let (xi, xj) = if l.own_is_from {
                    (poses[l.own], l.remote)
                } else {
                    (l.remote, poses[l.own])
                };
                let e = edge_error(&xi, &xj, &l.measurement);
                e.dot(&(l.information * e))
            })
            .sum();
        chain + loops
    }

    /// Diagonal blocks, super-diagonal blocks and gradient of ½ cost.
    fn normal_equations(&self, poses: &[Pose2]) -> (Vec<Matrix3<f64>>, Vec<Matrix3<f64>>, Vec<Vector3<f64>>) {
        let n = poses.len();
        let mut d = vec![Matrix3::zeros(); n];
        let mut u = vec![Matrix3::zeros(); n.saturating_sub(1)];
        let mut g = vec![Vector3::zeros(); n];
        for (k, l) in self.chain.iter().enumerate() {
            let (e, a, b) = edge_linearize(&poses[k], &poses[k + 1], &l.measurement);
            let at_o = a.transpose() * l.information;
            let bt_o = b.transpose() * l.information;
            d[k] += at_o * a;
            d[k + 1] += bt_o * b;
            u[k] += at_o * b;
            g[k] += at_o * e;
            g[k + 1] += bt_o * e;
        }
        for l in &self.loops {
            let (xi, xj) = if l.own_is_from {
                (poses[l.own], l.remote)
            } else {
                (l.remote, poses[l.own])
            };
            let (e, a, b) = edge_linearize(&xi, &xj, &l.measurement);
            let j = if l.own_is_from { a } else { b };
            let jt_o = j.transpose() * l.information;
            d[l.own] += jt_o * j;
            g[l.own] += jt_o * e;
        }
        if let Some(f) = self.fixed {
            d[f] = Matrix3::identity();
            g[f] = Vector3::zeros();
            if f > 0 {
                u[f - 1] = Matrix3::zeros();
            }
            if f + 1 < n {
                u[f] = Matrix3::zeros();
            }
        }
        (d, u, g)
    }
}

/// Solve the damped block-tridiagonal system `(H + λ diag H) δ = -g`.
fn solve_tridiagonal(
    d: &[Matrix3<f64>],
    u: &[Matrix3<f64>],
    g: &[Vector3<f64>],
    lambda: f64,
) -> Option<Vec<Vector3<f64>>> {
    let n = d.len();
    let damp = |m: &Matrix3<f64>| {
        let mut out = *m;
        for k in 0..3 {
            out[(k, k)] += lambda * m[(k, k)].max(1e-12);
        }
        out
    };
    let mut y = Vec::with_capacity(n);
    let mut chol = Vec::with_capacity(n);
    for k in 0..n {
        let mut s = damp(&d[k]);
        let mut rhs = -g[k];
        if k > 0 {
            // M = Uᵀ S⁻¹ with S the previous Schur complement
            let prev: &nalgebra::Cholesky<f64, nalgebra::U3> = &chol[k - 1];
            let s_inv_u = prev.solve(&u[k - 1]);
            s -= u[k - 1].transpose() * s_inv_u;
            let s_inv_y = prev.solve(&y[k - 1]);
            rhs -= u[k - 1].transpose() * s_inv_y;
        }
        let c = s.cholesky()?;
        y.push(rhs);
        chol.push(c);
    }
    let mut delta = vec![Vector3::zeros(); n];
    for k in (0..n).rev() {
        let mut rhs = y[k];
        if k + 1 < n {
            rhs -= u[k] * delta[k + 1];
        }
        delta[k] = chol[k].solve(&rhs);
    }
    Some(delta)
}

fn apply(poses: &[Pose2], delta: &[Vector3<f64>]) -> Vec<Pose2> {
    poses
        .iter()
        .zip(delta)
        .map(|(p, d)| Pose2::new(p.x + d.x, p.y + d.y, p.theta + d.z))
        .collect()
}

/// Gauss-Newton with Levenberg-Marquardt damping on the poses of `robot` in
/// `fragment`, holding the neighbour poses in `separators` fixed. Steps are
/// accepted only if they lower the cost of the edges touching `robot`.
///
/// A robot without any usable loop edge is left untouched: its odometry
/// chain already has zero cost.
pub fn local_block_optimize(
    fragment: &mut PoseGraph,
    robot: RobotId,
    separators: &BTreeMap<NodeKey, Pose2>,
    cfg: &LocalConfig,
) -> LocalOutcome {
    let keys: Vec<NodeKey> = fragment
        .nodes
        .range(NodeKey::new(robot, 0)..=NodeKey::new(robot, usize::MAX))
        .map(|(k, _)| *k)
        .collect();
    let position: BTreeMap<NodeKey, usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let mut chain = Vec::with_capacity(keys.len().saturating_sub(1));
    let mut expected = 0;
    let mut odo: Vec<&Edge> = fragment
        .odometry_edges
        .iter()
        .filter(|e| e.from.robot == robot)
        .collect();
    odo.sort_by_key(|e| e.from);
    for e in odo {
        let (Some(&i), Some(&j)) = (position.get(&e.from), position.get(&e.to)) else {
            continue;
        };
        assert!(i == expected && j == i + 1, "odometry edges must chain consecutive nodes");
        expected += 1;
        chain.push(ChainLink {
            measurement: e.measurement,
            information: e.information,
        });
    }
    let mut outcome = LocalOutcome::default();
    let mut loops = Vec::new();
    for l in &fragment.loop_edges {
        let e = &l.edge;
        let (own, remote, own_is_from) = if e.from.robot == robot {
            (e.from, e.to, true)
        } else if e.to.robot == robot {
            (e.to, e.from, false)
        } else {
            continue;
        };
        let Some(&own) = position.get(&own) else { continue };
        let Some(remote) = separators.get(&remote).copied() else {
            outcome.missing_separators += 1;
            continue;
        };
        loops.push(LoopTerm {
            own,
            remote,
            own_is_from,
            measurement: e.measurement,
            information: e.information,
        });
    }
    let fixed = fragment.anchor.and_then(|a| position.get(&a).copied());
    let problem = Problem { chain, loops, fixed };
    let initial: Vec<Pose2> = keys.iter().map(|k| fragment.nodes[k].pose).collect();
    let mut poses = initial.clone();
    let mut cost = problem.cost(&poses);
    outcome.cost_before = cost;
    outcome.cost_after = cost;
    if problem.loops.is_empty() || keys.is_empty() {
        return outcome;
    }

    let mut lambda = cfg.initial_lambda;
    for _ in 0..cfg.iterations {
        outcome.iterations += 1;
        let (d, u, g) = problem.normal_equations(&poses);
        let mut accepted = None;
        let mut solved_any = false;
        while lambda < 1e10 {
            let Some(delta) = solve_tridiagonal(&d, &u, &g, lambda) else {
                lambda *= 10.0;
                continue;
            };
            solved_any = true;
            let biggest = delta.iter().map(|v| v.amax()).fold(0.0, f64::max);
            if biggest < 1e-12 {
                break;
            }
            let trial = apply(&poses, &delta);
            let trial_cost = problem.cost(&trial);
            if trial_cost < cost {
                accepted = Some((trial, trial_cost));
                lambda = (lambda / 10.0).max(1e-12);
                break;
            }
            lambda *= 10.0;
        }
        if !solved_any {
            outcome.singular = true;
        }
        let Some((trial, trial_cost)) = accepted else { break };
        let relative = (cost - trial_cost) / cost.max(f64::MIN_POSITIVE);
        poses = trial;
        cost = trial_cost;
        if relative < 1e-12 {
            break;
        }
    }

    outcome.cost_after = cost;
    outcome.step_norm = initial
        .iter()
        .zip(&poses)
        .map(|(a, b)| a.translation_distance(b).max(wrap_angle(a.theta - b.theta).abs()))
        .fold(0.0, f64::max);
    for (k, p) in keys.iter().zip(poses) {
        fragment.nodes.get_mut(k).expect("own node").pose = p;
    }
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpgo::{LoopConstraint, Node};

    fn info(s: f64) -> Matrix3<f64> {
        Matrix3::identity() / (s * s)
    }

    #[test]
    fn single_free_node_moves_to_weighted_average() {
        // node 1 of robot 0 sits between its odometry prediction from the
        // fixed anchor (x = 1) and a loop prediction from a fixed neighbour
        // (x = 2); with equal translational weights the optimum is x = 1.5
        let mut g = PoseGraph::default();
        let r0 = RobotId(0);
        let k0 = NodeKey::new(r0, 0);
        let k1 = NodeKey::new(r0, 1);
        g.nodes.insert(k0, Node { t: 0.0, pose: Pose2::identity() });
        g.nodes.insert(k1, Node { t: 1.0, pose: Pose2::new(1.0, 0.0, 0.0) });
        g.anchor = Some(k0);
        g.odometry_edges.push(Edge {
            from: k0,
            to: k1,
            measurement: Pose2::new(1.0, 0.0, 0.0),
            information: info(1.0),
        });
        let remote = NodeKey::new(RobotId(1), 0);
        g.loop_edges.push(LoopConstraint {
            id: 0,
            edge: Edge {
                from: remote,
                to: k1,
                measurement: Pose2::new(2.0, 0.0, 0.0),
                information: info(1.0),
            },
        });
        let seps = BTreeMap::from([(remote, Pose2::identity())]);
        let out = local_block_optimize(&mut g, r0, &seps, &LocalConfig::default());
        let p = g.pose(&k1).unwrap();
        assert!((p.x - 1.5).abs() < 1e-9 && p.y.abs() < 1e-12 && p.theta.abs() < 1e-12, "{p}");
        assert!((out.cost_after - 0.5).abs() < 1e-9);
        assert_eq!(g.pose(&k0), Some(Pose2::identity()));

        let again = local_block_optimize(&mut g, r0, &seps, &LocalConfig::default());
        assert!(again.step_norm < 1e-8);
    }

    #[test]
    fn missing_separator_is_reported() {
        let mut g = PoseGraph::default();
        let k = NodeKey::new(RobotId(2), 0);
        g.nodes.insert(k, Node { t: 0.0, pose: Pose2::identity() });
        g.loop_edges.push(LoopConstraint {
            id: 4,
            edge: Edge {
                from: NodeKey::new(RobotId(1), 9),
                to: k,
                measurement: Pose2::identity(),
                information: info(1.0),
            },
        });
        let out = local_block_optimize(&mut g, RobotId(2), &BTreeMap::new(), &LocalConfig::default());
        assert_eq!(out.missing_separators, 1);
        assert_eq!(out.step_norm, 0.0);
    }
}
