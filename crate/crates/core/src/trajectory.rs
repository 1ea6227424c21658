//! Timestamped pose sequences with interpolation.

use crate::geometry::Pose2;

/// A pose sequence with strictly increasing timestamps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    poses: Vec<Pose2>,
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("timestamp {t} does not increase past {last}")]
pub struct NonMonotone {
    pub t: f64,
    pub last: f64,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_samples(samples: impl IntoIterator<Item = (f64, Pose2)>) -> Result<Self, NonMonotone> {
        let mut traj = Self::new();
        for (t, p) in samples {
            traj.push(t, p)?;
        }
        Ok(traj)
    }

    pub fn push(&mut self, t: f64, pose: Pose2) -> Result<(), NonMonotone> {
        if let Some(&last) = self.times.last() {
            if !(t > last) {
                return Err(NonMonotone { t, last });
            }
        }
        self.times.push(t);
        self.poses.push(pose);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn poses(&self) -> &[Pose2] {
        &self.poses
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, Pose2)> + '_ {
        self.times.iter().copied().zip(self.poses.iter().copied())
    }

    pub fn first_time(&self) -> Option<f64> {
        self.times.first().copied()
    }

    pub fn last_time(&self) -> Option<f64> {
        self.times.last().copied()
    }

    pub fn last(&self) -> Option<(f64, Pose2)> {
        Some((*self.times.last()?, *self.poses.last()?))
    }

    pub fn get(&self, index: usize) -> Option<(f64, Pose2)> {
        Some((*self.times.get(index)?, *self.poses.get(index)?))
    }

    pub fn covers(&self, t: f64) -> bool {
        matches!((self.first_time(), self.last_time()), (Some(a), Some(b)) if t >= a && t <= b)
    }

    /// Pose at `t`, linear in position and shortest-arc in heading. Exact
    /// sample values are returned unchanged when `t` hits a timestamp.
    pub fn pose_at(&self, t: f64) -> Option<Pose2> {
        if !self.covers(t) {
            return None;
        }
        let idx = self.times.partition_point(|&s| s < t);
        if self.times[idx] == t {
            return Some(self.poses[idx]);
        }
        let (t0, t1) = (self.times[idx - 1], self.times[idx]);
        let alpha = (t - t0) / (t1 - t0);
        Some(self.poses[idx - 1].interpolate(&self.poses[idx], alpha))
    }

    /// Index of the sample nearest to `t`, if it lies within `tolerance`.
    pub fn nearest_index(&self, t: f64, tolerance: f64) -> Option<usize> {
        if self.is_empty() {
            return None;
        }
        let idx = self.times.partition_point(|&s| s < t);
        let candidates = [idx.checked_sub(1), (idx < self.len()).then_some(idx)];
        candidates
            .into_iter()
            .flatten()
            .min_by(|&a, &b| {
                (self.times[a] - t)
                    .abs()
                    .total_cmp(&(self.times[b] - t).abs())
            })
            .filter(|&i| (self.times[i] - t).abs() <= tolerance)
    }

    pub fn nearest(&self, t: f64, tolerance: f64) -> Option<Pose2> {
        self.nearest_index(t, tolerance).map(|i| self.poses[i])
    }

    /// Total travelled distance between `t0` and `t1` along the samples.
    pub fn path_length(&self, t0: f64, t1: f64) -> f64 {
        let mut pts: Vec<Pose2> = Vec::new();
        if let Some(p) = self.pose_at(t0) {
            pts.push(p);
        }
        pts.extend(
            self.iter()
                .filter(|&(t, _)| t > t0 && t < t1)
                .map(|(_, p)| p),
        );
        if let Some(p) = self.pose_at(t1) {
            pts.push(p);
        }
        pts.windows(2).map(|w| w[0].translation_distance(&w[1])).sum()
    }

    /// Drop every sample older than `t`, keeping one sample at or before it.
    pub fn truncate_before(&mut self, t: f64) {
        let idx = self.times.partition_point(|&s| s <= t);
        let keep_from = idx.saturating_sub(1);
        if keep_from > 0 {
            self.times.drain(..keep_from);
            self.poses.drain(..keep_from);
        }
    }

    /// Apply `f` to every pose.
    pub fn map_poses(&self, f: impl Fn(&Pose2) -> Pose2) -> Trajectory {
        Trajectory {
            times: self.times.clone(),
            poses: self.poses.iter().map(f).collect(),
        }
    }
}
