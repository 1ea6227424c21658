//! Line-oriented dataset files.
//!
//! ```text
//! # comment
//! ODOM <t> <robot> <x> <y> <theta>
//! UWB  <t> <from> <to> <distance>
//! GT   <t> <robot> <x> <y> <theta>
//! ```
//!
//! Fields are separated by whitespace. Floats are written in scientific
//! notation with 17 significant digits so a write/read cycle is lossless.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use super::{Dataset, GroundTruth, RangingMeasurement, RobotId};
use crate::geometry::Pose2;
use crate::trajectory::Trajectory;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Validation { line: usize, message: String },
}

impl DatasetError {
    pub fn line(&self) -> Option<usize> {
        match self {
            DatasetError::Io { .. } => None,
            DatasetError::Parse { line, .. } | DatasetError::Validation { line, .. } => Some(*line),
        }
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Parse {
        line,
        message: message.into(),
    }
}

fn invalid(line: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Validation {
        line,
        message: message.into(),
    }
}

struct Fields<'a> {
    line: usize,
    tag: &'a str,
    rest: std::str::SplitWhitespace<'a>,
}

impl Fields<'_> {
    fn float(&mut self, name: &str) -> Result<f64, DatasetError> {
        let raw = self
            .rest
            .next()
            .ok_or_else(|| parse_err(self.line, format!("{} record is missing field `{name}`", self.tag)))?;
        let v: f64 = raw
            .parse()
            .map_err(|_| parse_err(self.line, format!("field `{name}`: `{raw}` is not a number")))?;
        if !v.is_finite() {
            return Err(parse_err(self.line, format!("field `{name}` is not finite")));
        }
        Ok(v)
    }

    fn robot(&mut self, name: &str) -> Result<RobotId, DatasetError> {
        let raw = self
            .rest
            .next()
            .ok_or_else(|| parse_err(self.line, format!("{} record is missing field `{name}`", self.tag)))?;
        raw.parse()
            .map(RobotId)
            .map_err(|_| parse_err(self.line, format!("field `{name}`: `{raw}` is not a robot id")))
    }

    fn finish(mut self) -> Result<(), DatasetError> {
        match self.rest.next() {
            Some(extra) => Err(parse_err(self.line, format!("unexpected trailing field `{extra}`"))),
            None => Ok(()),
        }
    }
}

/// Parse dataset text. Record kinds may interleave freely.
pub fn parse_dataset(text: &str) -> Result<Dataset, DatasetError> {
    let mut odometry: BTreeMap<RobotId, Trajectory> = BTreeMap::new();
    let mut truth: BTreeMap<RobotId, Trajectory> = BTreeMap::new();
    let mut ranging = Vec::new();
    let mut last_uwb = f64::NEG_INFINITY;
    let mut mentioned: BTreeMap<RobotId, usize> = BTreeMap::new();

    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut parts = content.split_whitespace();
        let tag = parts.next().expect("non-empty line has a token");
        let mut f = Fields {
            line,
            tag,
            rest: parts,
        };
        match tag {
            "ODOM" | "GT" => {
                let t = f.float("t")?;
                let robot = f.robot("robot")?;
                let x = f.float("x")?;
                let y = f.float("y")?;
                let theta = f.float("theta")?;
                f.finish()?;
                let target = if tag == "ODOM" { &mut odometry } else { &mut truth };
                target
                    .entry(robot)
                    .or_default()
                    .push(t, Pose2::new(x, y, theta))
                    .map_err(|e| invalid(line, format!("{tag} robot {robot}: {e}")))?;
                mentioned.entry(robot).or_insert(line);
            }
            "UWB" => {
                let t = f.float("t")?;
                let from = f.robot("from")?;
                let to = f.robot("to")?;
                let distance = f.float("dist")?;
                f.finish()?;
                if from == to {
                    return Err(invalid(line, "ranging from a robot to itself"));
                }
                if distance < 0.0 {
                    return Err(invalid(line, "negative ranging distance"));
                }
                if t < last_uwb {
                    return Err(invalid(line, format!("UWB timestamp {t} goes back before {last_uwb}")));
                }
                last_uwb = t;
                mentioned.entry(from).or_insert(line);
                mentioned.entry(to).or_insert(line);
                ranging.push(RangingMeasurement {
                    t,
                    from,
                    to,
                    distance,
                });
            }
            other => return Err(parse_err(line, format!("unknown record type `{other}`"))),
        }
    }

    // robot ids must be dense 0..N-1 and every robot needs odometry
    let ids: BTreeSet<RobotId> = mentioned.keys().copied().collect();
    for (i, id) in ids.iter().enumerate() {
        if id.index() != i {
            return Err(invalid(
                mentioned[id],
                format!("robot ids must be dense 0..N-1; found {id} without {i}"),
            ));
        }
        if !odometry.contains_key(id) {
            return Err(invalid(mentioned[id], format!("robot {id} has no odometry")));
        }
    }

    Ok(Dataset {
        odometry,
        ranging,
        truth: (!truth.is_empty()).then_some(GroundTruth {
            trajectories: truth,
        }),
    })
}

fn push_pose_line(out: &mut String, tag: &str, t: f64, robot: RobotId, p: &Pose2) {
    writeln!(out, "{tag} {t:.16e} {robot} {:.16e} {:.16e} {:.16e}", p.x, p.y, p.theta)
        .expect("writing to a String cannot fail");
}

pub fn format_dataset(data: &Dataset) -> String {
    let mut out = String::new();
    out.push_str("# uwbslam dataset\n");
    for (&robot, traj) in &data.odometry {
        for (t, p) in traj.iter() {
            push_pose_line(&mut out, "ODOM", t, robot, &p);
        }
    }
    if let Some(truth) = &data.truth {
        for (&robot, traj) in &truth.trajectories {
            for (t, p) in traj.iter() {
                push_pose_line(&mut out, "GT", t, robot, &p);
            }
        }
    }
    for m in &data.ranging {
        writeln!(out, "UWB {:.16e} {} {} {:.16e}", m.t, m.from, m.to, m.distance)
            .expect("writing to a String cannot fail");
    }
    out
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text)
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<(), DatasetError> {
    std::fs::write(path, format_dataset(data)).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}
