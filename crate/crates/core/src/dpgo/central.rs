//! Batch Levenberg-Marquardt over every node of a pose graph, used as the
//! reference the distributed solver is checked against.

use std::collections::BTreeMap;

use nalgebra::{DVector, Matrix3};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use thiserror::Error;

use super::{edge_linearize, NodeKey, PoseGraph};
use crate::geometry::Pose2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DpgoError {
    #[error("graph has no anchor node")]
    NoAnchor,
    #[error("graph is disconnected; unreachable from the anchor: {}", list(.0))]
    Disconnected(Vec<NodeKey>),
}

fn list(keys: &[NodeKey]) -> String {
    const SHOWN: usize = 20;
    let mut s: Vec<String> = keys.iter().take(SHOWN).map(|k| k.to_string()).collect();
    if keys.len() > SHOWN {
        s.push(format!("... ({} total)", keys.len()));
    }
    s.join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CentralConfig {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    /// Stop when the relative cost decrease falls below this.
    pub cost_tolerance: f64,
    /// Stop when the largest update component falls below this.
    pub step_tolerance: f64,
}

impl Default for CentralConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_lambda: 1e-6,
            cost_tolerance: 1e-12,
            step_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralResult {
    pub graph: PoseGraph,
    pub initial_cost: f64,
    pub cost: f64,
    pub iterations: usize,
}

/// Variables: every node except the anchor, ordered by (stamp, robot,
/// index) so that simultaneous nodes of different robots sit together and
/// the factor stays banded.
fn ordering(graph: &PoseGraph) -> BTreeMap<NodeKey, usize> {
    let mut keys: Vec<(NodeKey, f64)> = graph
        .nodes
        .iter()
        .filter(|(k, _)| Some(**k) != graph.anchor)
        .map(|(k, n)| (*k, n.t))
        .collect();
    keys.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    keys.into_iter().enumerate().map(|(i, (k, _))| (k, i)).collect()
}

struct System {
    triplets: Vec<(usize, usize, f64)>,
    gradient: DVector<f64>,
    diagonal: DVector<f64>,
}

fn linearize(graph: &PoseGraph, vars: &BTreeMap<NodeKey, usize>) -> System {
    let n = 3 * vars.len();
    let mut triplets = Vec::new();
    let mut gradient = DVector::zeros(n);
    let mut diagonal = DVector::zeros(n);
    let block = |triplets: &mut Vec<(usize, usize, f64)>, r: usize, c: usize, m: &Matrix3<f64>| {
        for i in 0..3 {
            for j in 0..3 {
                triplets.push((3 * r + i, 3 * c + j, m[(i, j)]));
            }
        }
    };
    for e in graph.edges() {
        let (Some(xi), Some(xj)) = (graph.pose(&e.from), graph.pose(&e.to)) else {
            continue;
        };
        let (err, a, b) = edge_linearize(&xi, &xj, &e.measurement);
        let vi = vars.get(&e.from).copied();
        let vj = vars.get(&e.to).copied();
        let at_o = a.transpose() * e.information;
        let bt_o = b.transpose() * e.information;
        if let Some(i) = vi {
            let h = at_o * a;
            block(&mut triplets, i, i, &h);
            let gi = at_o * err;
            for k in 0..3 {
                gradient[3 * i + k] += gi[k];
            }
            for k in 0..3 {
                diagonal[3 * i + k] += h[(k, k)];
            }
        }
        if let Some(j) = vj {
            let h = bt_o * b;
            block(&mut triplets, j, j, &h);
            let gj = bt_o * err;
            for k in 0..3 {
                gradient[3 * j + k] += gj[k];
            }
            for k in 0..3 {
                diagonal[3 * j + k] += h[(k, k)];
            }
        }
        if let (Some(i), Some(j)) = (vi, vj) {
            let h = at_o * b;
            block(&mut triplets, i, j, &h);
            block(&mut triplets, j, i, &h.transpose());
        }
    }
    System {
        triplets,
        gradient,
        diagonal,
    }
}

fn solve(sys: &System, lambda: f64) -> Option<DVector<f64>> {
    let n = sys.gradient.len();
    let mut coo = CooMatrix::new(n, n);
    for &(r, c, v) in &sys.triplets {
        coo.push(r, c, v);
    }
    for k in 0..n {
        coo.push(k, k, lambda * sys.diagonal[k].max(1e-12));
    }
    let csc = CscMatrix::from(&coo);
    let chol = CscCholesky::factor(&csc).ok()?;
    let step = chol.solve(&(-&sys.gradient));
    Some(step.column(0).into_owned())
}

fn apply(graph: &PoseGraph, vars: &BTreeMap<NodeKey, usize>, step: &DVector<f64>) -> PoseGraph {
    let mut out = graph.clone();
    for (k, &i) in vars {
        let n = out.nodes.get_mut(k).expect("variable node exists");
        n.pose = Pose2::new(
            n.pose.x + step[3 * i],
            n.pose.y + step[3 * i + 1],
            n.pose.theta + step[3 * i + 2],
        );
    }
    out
}

/// Optimize all poses with the anchor fixed. Only cost-decreasing steps are
/// taken, so the returned cost never exceeds the initial one.
pub fn centralized_solve(graph: &PoseGraph, cfg: &CentralConfig) -> Result<CentralResult, DpgoError> {
    if graph.anchor.is_none() {
        return Err(DpgoError::NoAnchor);
    }
    let unreachable = graph.unreachable_from_anchor();
    if !unreachable.is_empty() {
        return Err(DpgoError::Disconnected(unreachable));
    }
    let vars = ordering(graph);
    let mut current = graph.clone();
    let initial_cost = current.cost();
    let mut cost = initial_cost;
    let mut lambda = cfg.initial_lambda;
    let mut iterations = 0;
    if vars.is_empty() {
        return Ok(CentralResult {
            graph: current,
            initial_cost,
            cost,
            iterations,
        });
    }
    while iterations < cfg.max_iterations && cost > 0.0 {
        iterations += 1;
        let sys = linearize(&current, &vars);
        let mut accepted = false;
        let mut small_step = false;
        while lambda < 1e10 {
            let Some(step) = solve(&sys, lambda) else {
                lambda *= 10.0;
                continue;
            };
            if step.amax() < cfg.step_tolerance {
                small_step = true;
                break;
            }
            let trial = apply(&current, &vars, &step);
            let trial_cost = trial.cost();
            if trial_cost < cost {
                let relative = (cost - trial_cost) / cost;
                current = trial;
                cost = trial_cost;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                small_step = relative < cfg.cost_tolerance;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted || small_step {
            break;
        }
    }
    Ok(CentralResult {
        graph: current,
        initial_cost,
        cost,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpgo::{build_graph, GraphConfig, LoopConstraint};
    use crate::scenario::RobotId;
    use crate::trajectory::Trajectory;

    fn wiggle(offset: Pose2, n: usize) -> Trajectory {
        Trajectory::from_samples((0..n).map(|k| {
            let t = k as f64 * 0.1;
            (t, offset.compose(&Pose2::new(0.3 * t, (0.5 * t).sin(), 0.2 * t)))
        }))
        .unwrap()
    }

    #[test]
    fn chain_only_is_dead_reckoning() {
        let odo = BTreeMap::from([(RobotId(0), wiggle(Pose2::identity(), 20))]);
        let g = build_graph(&odo, &[], &GraphConfig::default());
        let r = centralized_solve(&g, &CentralConfig::default()).unwrap();
        assert_eq!(r.graph, g);
        assert_eq!(r.cost, r.initial_cost);
    }

    #[test]
    fn disconnected_graph_lists_nodes() {
        let odo = BTreeMap::from([
            (RobotId(0), wiggle(Pose2::identity(), 3)),
            (RobotId(1), wiggle(Pose2::identity(), 2)),
        ]);
        let g = build_graph(&odo, &[], &GraphConfig::default());
        match centralized_solve(&g, &CentralConfig::default()) {
            Err(DpgoError::Disconnected(keys)) => assert_eq!(keys.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn consistent_loops_recover_truth() {
        // robot 1 truly starts at (2, 1, 0.5) in robot 0's frame
        let start = Pose2::new(2.0, 1.0, 0.5);
        let truth0 = wiggle(Pose2::identity(), 30);
        let truth1 = wiggle(start, 30);
        let odo = BTreeMap::from([(RobotId(0), truth0.clone()), (RobotId(1), wiggle(Pose2::identity(), 30))]);
        let loops: Vec<LoopConstraint> = [5usize, 15, 25]
            .iter()
            .enumerate()
            .map(|(id, &k)| LoopConstraint {
                id: id as u64,
                edge: crate::dpgo::Edge {
                    from: NodeKey::new(RobotId(0), k),
                    to: NodeKey::new(RobotId(1), k),
                    measurement: truth0.get(k).unwrap().1.between(&truth1.get(k).unwrap().1),
                    information: Matrix3::identity() * 4.0,
                },
            })
            .collect();
        let mut g = build_graph(&odo, &loops, &GraphConfig::default());
        // start far from the solution: robot 1 at its odometry frame
        let r = centralized_solve(&g, &CentralConfig::default()).unwrap();
        assert!(r.cost <= r.initial_cost);
        g.initialize_from_loops();
        let r = centralized_solve(&g, &CentralConfig::default()).unwrap();
        assert!(r.cost < 1e-12, "{}", r.cost);
        for (k, n) in &r.graph.nodes {
            let truth = if k.robot == RobotId(0) { &truth0 } else { &truth1 };
            let p = truth.get(k.index).unwrap().1;
            assert!(n.pose.translation_distance(&p) < 1e-6);
            assert!(n.pose.angle_distance(&p) < 1e-6);
        }
    }
}
