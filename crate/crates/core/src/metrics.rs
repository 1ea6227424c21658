//! Error metrics against ground truth and the text formats of run outputs.
//!
//! Errors are reported as mean ± std of absolute errors (translation as
//! Euclidean distance in m, rotation as wrapped absolute angle in degrees)
//! together with the mean squared error.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::estimation::LoopClosure;
use crate::geometry::{Covariance3, Pose2};
use crate::node::ClosureRecord;
use crate::scenario::{GroundTruth, RobotId};
use crate::sim::{median, PipelineOutput};
use crate::trajectory::Trajectory;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no estimate overlaps the ground truth in time")]
    NoOverlap,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Translation (m) and rotation (deg) error of one estimate.
pub fn pose_error(estimate: &Pose2, truth: &Pose2) -> (f64, f64) {
    (
        estimate.translation_distance(truth),
        estimate.angle_distance(truth).to_degrees(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorStats {
    pub count: usize,
    pub mean_translation: f64,
    pub std_translation: f64,
    pub mse_translation: f64,
    pub max_translation: f64,
    pub mean_rotation_deg: f64,
    pub std_rotation_deg: f64,
    pub mse_rotation_deg: f64,
    pub max_rotation_deg: f64,
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64, f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.clone().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let mse = v.clone().map(|x| x * x).sum::<f64>() / n;
    let max = v.fold(0.0, f64::max);
    (mean, var.sqrt(), mse, max)
}

impl ErrorStats {
    /// Population statistics of (translation, rotation-deg) pairs.
    pub fn from_errors(errors: &[(f64, f64)]) -> Self {
        if errors.is_empty() {
            return Self::default();
        }
        let (mt, st, et, xt) = mean_std(errors.iter().map(|e| e.0));
        let (mr, sr, er, xr) = mean_std(errors.iter().map(|e| e.1));
        Self {
            count: errors.len(),
            mean_translation: mt,
            std_translation: st,
            mse_translation: et,
            max_translation: xt,
            mean_rotation_deg: mr,
            std_rotation_deg: sr,
            mse_rotation_deg: er,
            max_rotation_deg: xr,
        }
    }
}

/// Error of every closure against the true relative pose at its stamp.
pub fn closure_errors(closures: &[LoopClosure], truth: &GroundTruth) -> Vec<(f64, f64)> {
    closures
        .iter()
        .filter_map(|c| Some(pose_error(&c.relative_pose, &truth.relative_pose(c.from, c.to, c.t)?)))
        .collect()
}

/// Relative poses read off estimated trajectories at the closures' stamps.
pub fn trajectory_relative_errors(
    closures: &[LoopClosure],
    trajectories: &BTreeMap<RobotId, Trajectory>,
    truth: &GroundTruth,
) -> Vec<(f64, f64)> {
    closures
        .iter()
        .filter_map(|c| {
            let a = trajectories.get(&c.from)?.pose_at(c.t)?;
            let b = trajectories.get(&c.to)?.pose_at(c.t)?;
            Some(pose_error(&a.between(&b), &truth.relative_pose(c.from, c.to, c.t)?))
        })
        .collect()
}

/// Rigid transform `T` minimizing Σ‖T·pᵢ − qᵢ‖² over point pairs.
pub fn align_se2(pairs: &[((f64, f64), (f64, f64))]) -> Pose2 {
    if pairs.is_empty() {
        return Pose2::identity();
    }
    let n = pairs.len() as f64;
    let (mut px, mut py, mut qx, mut qy) = (0.0, 0.0, 0.0, 0.0);
    for &((a, b), (c, d)) in pairs {
        px += a;
        py += b;
        qx += c;
        qy += d;
    }
    let (px, py, qx, qy) = (px / n, py / n, qx / n, qy / n);
    let (mut s_cos, mut s_sin) = (0.0, 0.0);
    for &((a, b), (c, d)) in pairs {
        let (ax, ay, bx, by) = (a - px, b - py, c - qx, d - qy);
        s_cos += ax * bx + ay * by;
        s_sin += ax * by - ay * bx;
    }
    let theta = s_sin.atan2(s_cos);
    let (s, c) = theta.sin_cos();
    Pose2::new(qx - (c * px - s * py), qy - (s * px + c * py), theta)
}

fn overlapping(
    estimates: &BTreeMap<RobotId, Trajectory>,
    truth: &GroundTruth,
) -> Vec<(Pose2, Pose2)> {
    estimates
        .iter()
        .flat_map(|(r, traj)| traj.iter().filter_map(move |(t, p)| Some((p, truth.pose_at(*r, t)?))))
        .collect()
}

/// Per-pose errors of the estimates. With `align`, one rigid transform
/// fitted over all robots jointly is applied first.
pub fn trajectory_errors(
    estimates: &BTreeMap<RobotId, Trajectory>,
    truth: &GroundTruth,
    align: bool,
) -> Result<Vec<(f64, f64)>, MetricsError> {
    let pairs = overlapping(estimates, truth);
    if pairs.is_empty() {
        return Err(MetricsError::NoOverlap);
    }
    let motion = if align {
        let points: Vec<_> = pairs.iter().map(|(e, g)| ((e.x, e.y), (g.x, g.y))).collect();
        align_se2(&points)
    } else {
        Pose2::identity()
    };
    Ok(pairs
        .iter()
        .map(|(e, g)| pose_error(&motion.compose(e), g))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    /// Every estimated closure.
    pub raw: ErrorStats,
    /// Closures kept by PCM.
    pub pcm: ErrorStats,
    /// Relative poses at the inlier stamps read off the optimized trajectories.
    pub dpgo: ErrorStats,
    /// Optimized trajectories after joint rigid alignment.
    pub trajectory: ErrorStats,
    /// Optimized trajectories in the anchor frame, against anchored truth.
    pub anchored: ErrorStats,
    pub raw_closures: usize,
    pub inlier_closures: usize,
    pub injected_outliers: usize,
    pub injected_inliers: usize,
    /// Median wall-clock time per operation (ms).
    pub timings: BTreeMap<String, f64>,
    pub bytes: u64,
}

pub fn compute_metrics(
    closures: &[ClosureRecord],
    inliers: &BTreeSet<u64>,
    trajectories: &BTreeMap<RobotId, Trajectory>,
    truth: &GroundTruth,
) -> Result<MetricsReport, MetricsError> {
    let raw: Vec<LoopClosure> = closures.iter().map(|c| c.closure).collect();
    let kept: Vec<LoopClosure> = closures
        .iter()
        .filter(|c| inliers.contains(&c.id))
        .map(|c| c.closure)
        .collect();
    let anchored_truth = truth.anchored();
    Ok(MetricsReport {
        raw: ErrorStats::from_errors(&closure_errors(&raw, truth)),
        pcm: ErrorStats::from_errors(&closure_errors(&kept, truth)),
        dpgo: ErrorStats::from_errors(&trajectory_relative_errors(&kept, trajectories, truth)),
        trajectory: ErrorStats::from_errors(&trajectory_errors(trajectories, truth, true)?),
        anchored: ErrorStats::from_errors(&trajectory_errors(trajectories, &anchored_truth, false)?),
        raw_closures: closures.len(),
        inlier_closures: kept.len(),
        injected_outliers: closures.iter().filter(|c| c.injected).count(),
        injected_inliers: closures
            .iter()
            .filter(|c| c.injected && inliers.contains(&c.id))
            .count(),
        timings: BTreeMap::new(),
        bytes: 0,
    })
}

/// Metrics of a pipeline run, including timings and communication.
pub fn run_metrics(output: &PipelineOutput, truth: &GroundTruth) -> Result<MetricsReport, MetricsError> {
    let mut report = compute_metrics(&output.closures, &output.inliers, &output.trajectories, truth)?;
    let t = &output.timings;
    for (name, v) in [
        ("estimation", &t.estimation),
        ("pcm", &t.pcm),
        ("dpgo_round", &t.dpgo_round),
        ("tick", &t.tick),
    ] {
        if let Some(m) = median(v) {
            report.timings.insert(name.to_string(), m);
        }
    }
    report.bytes = output.comm.total_bytes();
    Ok(report)
}

impl MetricsReport {
    fn rows(&self) -> Vec<(String, String)> {
        let mut rows = Vec::new();
        for (stage, s) in [
            ("raw", &self.raw),
            ("pcm", &self.pcm),
            ("dpgo", &self.dpgo),
            ("trajectory", &self.trajectory),
            ("anchored", &self.anchored),
        ] {
            rows.push((format!("{stage}.count"), s.count.to_string()));
            for (k, v) in [
                ("mean_translation_m", s.mean_translation),
                ("std_translation_m", s.std_translation),
                ("mse_translation_m2", s.mse_translation),
                ("max_translation_m", s.max_translation),
                ("mean_rotation_deg", s.mean_rotation_deg),
                ("std_rotation_deg", s.std_rotation_deg),
                ("mse_rotation_deg2", s.mse_rotation_deg),
                ("max_rotation_deg", s.max_rotation_deg),
            ] {
                rows.push((format!("{stage}.{k}"), format!("{v}")));
            }
        }
        rows.push(("closures.raw".into(), self.raw_closures.to_string()));
        rows.push(("closures.inlier".into(), self.inlier_closures.to_string()));
        rows.push(("closures.injected".into(), self.injected_outliers.to_string()));
        rows.push(("closures.injected_inlier".into(), self.injected_inliers.to_string()));
        for (k, v) in &self.timings {
            rows.push((format!("timing_ms.{k}"), format!("{v}")));
        }
        rows.push(("comm.bytes".into(), self.bytes.to_string()));
        rows
    }

    /// `key,value` lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("key,value\n");
        for (k, v) in self.rows() {
            let _ = writeln!(out, "{k},{v}");
        }
        out
    }

    /// Human-readable table in the mean ± std format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<11} {:>6} {:>20} {:>22} {:>12}", "stage", "count", "translation (m)", "rotation (deg)", "mse (m2)");
        for (stage, s) in [
            ("raw", &self.raw),
            ("pcm", &self.pcm),
            ("dpgo", &self.dpgo),
            ("trajectory", &self.trajectory),
            ("anchored", &self.anchored),
        ] {
            let _ = writeln!(
                out,
                "{:<11} {:>6} {:>9.4} ± {:<8.4} {:>10.4} ± {:<9.4} {:>12.6}",
                stage, s.count, s.mean_translation, s.std_translation, s.mean_rotation_deg, s.std_rotation_deg, s.mse_translation
            );
        }
        let _ = writeln!(
            out,
            "closures: {} raw, {} inlier, {} injected ({} kept)",
            self.raw_closures, self.inlier_closures, self.injected_outliers, self.injected_inliers
        );
        for (k, v) in &self.timings {
            let _ = writeln!(out, "median {k}: {v:.3} ms");
        }
        let _ = writeln!(out, "communication: {} bytes", self.bytes);
        out
    }
}

/// `EST t robot x y theta` lines.
pub fn format_estimates(trajectories: &BTreeMap<RobotId, Trajectory>) -> String {
    let mut out = String::from("# EST t robot x y theta\n");
    for (r, traj) in trajectories {
        for (t, p) in traj.iter() {
            let _ = writeln!(out, "EST {t:.16e} {} {:.16e} {:.16e} {:.16e}", r.0, p.x, p.y, p.theta);
        }
    }
    out
}

fn parse_fields<const N: usize>(line: usize, fields: &[&str]) -> Result<[f64; N], MetricsError> {
    if fields.len() != N {
        return Err(MetricsError::Parse {
            line,
            message: format!("expected {N} fields, found {}", fields.len()),
        });
    }
    let mut out = [0.0; N];
    for (o, f) in out.iter_mut().zip(fields) {
        *o = f.parse().map_err(|_| MetricsError::Parse {
            line,
            message: format!("bad number {f:?}"),
        })?;
    }
    Ok(out)
}

fn records<'a>(text: &'a str, tag: &str) -> impl Iterator<Item = (usize, Vec<&'a str>)> + 'a {
    let tag = tag.to_string();
    text.lines().enumerate().filter_map(move |(i, l)| {
        let l = l.trim();
        if l.is_empty() || l.starts_with('#') {
            return None;
        }
        let mut f: Vec<&str> = l.split_whitespace().collect();
        (f.first() == Some(&tag.as_str())).then(|| {
            f.remove(0);
            (i + 1, f)
        })
    })
}

pub fn parse_estimates(text: &str) -> Result<BTreeMap<RobotId, Trajectory>, MetricsError> {
    let mut out: BTreeMap<RobotId, Trajectory> = BTreeMap::new();
    for (line, f) in records(text, "EST") {
        let [t, r, x, y, th] = parse_fields::<5>(line, &f)?;
        out.entry(RobotId(r as u32))
            .or_default()
            .push(t, Pose2::new(x, y, th))
            .map_err(|e| MetricsError::Parse {
                line,
                message: e.to_string(),
            })?;
    }
    Ok(out)
}

/// `LC id from to t x y theta from_index to_index inlier injected residual
/// window sigma_t sigma_theta` lines.
pub fn format_closures(closures: &[ClosureRecord], inliers: &BTreeSet<u64>) -> String {
    let mut out = String::from(
        "# LC id from to t x y theta from_index to_index inlier injected residual window sigma_t sigma_theta\n",
    );
    for c in closures {
        let lc = &c.closure;
        let m = lc.covariance.matrix();
        let _ = writeln!(
            out,
            "LC {} {} {} {:.16e} {:.16e} {:.16e} {:.16e} {} {} {} {} {:.16e} {} {:.16e} {:.16e}",
            c.id,
            lc.from.0,
            lc.to.0,
            lc.t,
            lc.relative_pose.x,
            lc.relative_pose.y,
            lc.relative_pose.theta,
            c.from_index,
            c.to_index,
            u8::from(inliers.contains(&c.id)),
            u8::from(c.injected),
            lc.residual,
            lc.window_size,
            m[(0, 0)].sqrt(),
            m[(2, 2)].sqrt(),
        );
    }
    out
}

pub fn parse_closures(text: &str) -> Result<(Vec<ClosureRecord>, BTreeSet<u64>), MetricsError> {
    let mut closures = Vec::new();
    let mut inliers = BTreeSet::new();
    for (line, f) in records(text, "LC") {
        let v = parse_fields::<15>(line, &f)?;
        let id: u64 = f[0].parse().map_err(|_| MetricsError::Parse {
            line,
            message: "bad id".into(),
        })?;
        let covariance = Covariance3::from_sigmas(v[13], v[14]).map_err(|e| MetricsError::Parse {
            line,
            message: e.to_string(),
        })?;
        let relative_pose = Pose2::new(v[4], v[5], v[6]);
        closures.push(ClosureRecord {
            id,
            closure: LoopClosure {
                from: RobotId(v[1] as u32),
                to: RobotId(v[2] as u32),
                t: v[3],
                relative_pose,
                covariance,
                residual: v[11],
                window_size: v[12] as usize,
                coarse_pose: relative_pose,
                converged: true,
            },
            from_index: v[7] as usize,
            to_index: v[8] as usize,
            injected: v[10] != 0.0,
        });
        if v[9] != 0.0 {
            inliers.insert(id);
        }
    }
    Ok((closures, inliers))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(offset: Pose2) -> Trajectory {
        Trajectory::from_samples((0..20).map(|k| {
            let t = k as f64;
            (t, offset.compose(&Pose2::new(t, (0.3 * t).sin(), 0.1 * t)))
        }))
        .unwrap()
    }

    fn truth() -> GroundTruth {
        GroundTruth {
            trajectories: BTreeMap::from([
                (RobotId(0), line(Pose2::identity())),
                (RobotId(1), line(Pose2::new(1.0, 2.0, 0.5))),
            ]),
        }
    }

    #[test]
    fn perfect_estimates_have_zero_error() {
        let g = truth();
        let e = trajectory_errors(&g.trajectories, &g, true).unwrap();
        assert!(e.iter().all(|&(t, r)| t < 1e-9 && r < 1e-9));
    }

    #[test]
    fn rigid_offset_vanishes_after_alignment() {
        let g = truth();
        let moved = g.transformed(&Pose2::new(-3.0, 4.0, 2.0));
        let e = trajectory_errors(&moved.trajectories, &g, true).unwrap();
        assert!(e.iter().all(|&(t, r)| t < 1e-9 && r < 1e-7), "{e:?}");
    }

    #[test]
    fn closure_offset_by_one_meter() {
        let g = truth();
        let z = g.relative_pose(RobotId(0), RobotId(1), 5.0).unwrap();
        let lc = LoopClosure {
            from: RobotId(0),
            to: RobotId(1),
            t: 5.0,
            relative_pose: z,
            covariance: Covariance3::from_sigmas(1.0, 1.0).unwrap(),
            residual: 0.0,
            window_size: 1,
            coarse_pose: z,
            converged: true,
        };
        let mut off = lc;
        off.relative_pose = Pose2::new(z.x + 1.0, z.y, z.theta);
        let e = closure_errors(&[lc, off], &g);
        assert!(e[0].0 < 1e-12);
        assert_eq!(e[1].0, 1.0);
        assert!(e[1].1 < 1e-12);
    }

    #[test]
    fn no_overlap_is_an_error() {
        let g = truth();
        let est = BTreeMap::from([(RobotId(0), Trajectory::from_samples([(100.0, Pose2::identity())]).unwrap())]);
        assert!(matches!(trajectory_errors(&est, &g, true), Err(MetricsError::NoOverlap)));
    }

    #[test]
    fn stats_mean_std_mse() {
        let s = ErrorStats::from_errors(&[(1.0, 10.0), (3.0, 30.0)]);
        assert_eq!(s.mean_translation, 2.0);
        assert_eq!(s.std_translation, 1.0);
        assert_eq!(s.mse_translation, 5.0);
        assert_eq!(s.max_rotation_deg, 30.0);
    }

    #[test]
    fn estimates_and_closures_round_trip() {
        let g = truth();
        let text = format_estimates(&g.trajectories);
        assert_eq!(parse_estimates(&text).unwrap(), g.trajectories);
        let rec = ClosureRecord {
            id: 7,
            closure: LoopClosure {
                from: RobotId(0),
                to: RobotId(1),
                t: 3.0,
                relative_pose: Pose2::new(1.0, -2.0, 0.3),
                covariance: Covariance3::from_sigmas(0.5, 0.15).unwrap(),
                residual: 0.25,
                window_size: 2500,
                coarse_pose: Pose2::new(1.0, -2.0, 0.3),
                converged: true,
            },
            from_index: 30,
            to_index: 31,
            injected: true,
        };
        let text = format_closures(&[rec], &BTreeSet::from([7]));
        let (back, inl) = parse_closures(&text).unwrap();
        assert_eq!(back[0].id, 7);
        assert_eq!(back[0].closure.relative_pose, rec.closure.relative_pose);
        assert!(back[0].injected);
        assert!(inl.contains(&7));
        assert!((back[0].closure.covariance.matrix() - rec.closure.covariance.matrix()).norm() < 1e-12);
    }
}
