//! Offline and closed-loop navigation safety metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Trajectory;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("invalid-argument: {0}")]
    InvalidArgument(String),
}

impl MetricsError {
    pub fn code(&self) -> &'static str {
        "invalid-argument"
    }
}

/// Planar laser scan. A reading equal to `max_range` means no return.
#[derive(Debug, Clone, PartialEq)]
pub struct LaserScan<T> {
    pub angle_min: T,
    pub angle_increment: T,
    pub ranges: Vec<T>,
    pub max_range: T,
}

impl<T: Scalar> LaserScan<T> {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.max_range > T::zero()) {
            return Err(MetricsError::InvalidArgument("max_range must be positive".into()));
        }
        if let Some(k) = self
            .ranges
            .iter()
            .position(|&r| !(r > T::zero() && r <= self.max_range))
        {
            return Err(MetricsError::InvalidArgument(format!(
                "range {k} = {} outside (0, {}]",
                self.ranges[k], self.max_range
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn beam_angle(&self, k: usize) -> T {
        self.angle_min + self.angle_increment * T::lit(k as f64)
    }
}

/// Obstacle points in the robot frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObstacleCloud<T> {
    pub points: Vec<(T, T)>,
}

impl<T: Scalar> ObstacleCloud<T> {
    pub fn new(points: Vec<(T, T)>) -> Self {
        Self { points }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Converts every return closer than `max_range` to a Cartesian point.
pub fn scan_to_points<T: Scalar>(scan: &LaserScan<T>) -> ObstacleCloud<T> {
    let points = scan
        .ranges
        .iter()
        .enumerate()
        .filter(|(_, &r)| r < scan.max_range)
        .map(|(k, &r)| {
            let (s, c) = scan.beam_angle(k).sin_cos();
            (r * c, r * s)
        })
        .collect();
    ObstacleCloud { points }
}

/// Shared metric parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// Densification step along trajectories, meters.
    pub interp_step: f64,
    /// Near-collision threshold, meters.
    pub robot_width: f64,
    /// Clearance reported when there are no obstacle points.
    pub empty_clearance: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            interp_step: 0.05,
            robot_width: 0.5,
            empty_clearance: 10.0,
        }
    }
}

/// Points along the waypoint polyline spaced at most `step` apart,
/// including every waypoint.
pub fn densify<T: Scalar>(positions: &[(T, T)], step: T) -> Vec<(T, T)> {
    let mut out = Vec::new();
    if let Some(&first) = positions.first() {
        out.push(first);
    }
    for w in positions.windows(2) {
        let (a, b) = (w[0], w[1]);
        let len = (b.0 - a.0).hypot(b.1 - a.1);
        let pieces = (len / step).ceil().to_usize().unwrap_or(1).max(1);
        for k in 1..=pieces {
            let u = T::lit(k as f64) / T::lit(pieces as f64);
            out.push((a.0 + (b.0 - a.0) * u, a.1 + (b.1 - a.1) * u));
        }
    }
    out
}

fn min_distance<T: Scalar>(samples: &[(T, T)], cloud: &ObstacleCloud<T>) -> T {
    let mut best = T::infinity();
    for &(px, py) in samples {
        for &(ox, oy) in &cloud.points {
            let d2 = (px - ox) * (px - ox) + (py - oy) * (py - oy);
            if d2 < best {
                best = d2;
            }
        }
    }
    best.sqrt()
}

/// Minimum distance between the densified trajectory and any obstacle point.
pub fn min_clearance<T: Scalar>(
    traj: &Trajectory<T>,
    cloud: &ObstacleCloud<T>,
    cfg: &MetricConfig,
) -> T {
    if cloud.is_empty() {
        return T::lit(cfg.empty_clearance);
    }
    let samples = densify(&traj.positions(), T::lit(cfg.interp_step));
    min_distance(&samples, cloud)
}

/// Strictly closer than `robot_width` to an obstacle.
pub fn is_near_collision<T: Scalar>(
    traj: &Trajectory<T>,
    cloud: &ObstacleCloud<T>,
    robot_width: T,
    cfg: &MetricConfig,
) -> bool {
    min_clearance(traj, cloud, cfg) < robot_width
}

/// Mean index-aligned waypoint distance; headings are ignored.
pub fn deviation<T: Scalar>(pred: &Trajectory<T>, preferred: &Trajectory<T>) -> Result<T, MetricsError> {
    if pred.len() != preferred.len() {
        return Err(MetricsError::InvalidArgument(format!(
            "trajectory lengths differ: {} vs {}",
            pred.len(),
            preferred.len()
        )));
    }
    let total = pred
        .waypoints()
        .iter()
        .zip(preferred.waypoints())
        .fold(T::zero(), |acc, (a, b)| acc + a.distance_to(b));
    Ok(total / T::lit(pred.len() as f64))
}

/// Collided runs that were terminated never report full completion.
pub const COLLIDED_COMPLETION_CAP: f64 = 0.999;

/// Fraction of the planned path completed toward the goal.
pub fn path_completion<T: Scalar>(
    executed: T,
    planned: T,
    reached_goal: bool,
    collided_terminated: bool,
) -> T {
    if reached_goal {
        return T::one();
    }
    if planned <= T::zero() {
        return T::zero();
    }
    let cap = if collided_terminated {
        T::lit(COLLIDED_COMPLETION_CAP)
    } else {
        T::one()
    };
    (executed.max(T::zero()) / planned).min(cap)
}

/// One offline evaluation sample.
#[derive(Debug, Clone)]
pub struct OfflineSample<T> {
    pub prediction: Trajectory<T>,
    pub preferred: Trajectory<T>,
    pub cloud: ObstacleCloud<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub deviation: f64,
    pub clearance: f64,
    pub near_collision: bool,
}

/// Offline metrics aggregated over a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineReport {
    pub samples: usize,
    pub near_collision_count: usize,
    pub mean_deviation: f64,
    pub mean_min_clearance: f64,
    pub rows: Vec<SampleRow>,
}

pub fn evaluate_batch<T: Scalar>(
    samples: &[OfflineSample<T>],
    cfg: &MetricConfig,
) -> Result<OfflineReport, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::InvalidArgument("empty evaluation batch".into()));
    }
    let width = T::lit(cfg.robot_width);
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let clearance = min_clearance(&s.prediction, &s.cloud, cfg);
        rows.push(SampleRow {
            deviation: deviation(&s.prediction, &s.preferred)?.as_f64(),
            clearance: clearance.as_f64(),
            near_collision: clearance < width,
        });
    }
    Ok(summarize_rows(rows))
}

pub fn summarize_rows(rows: Vec<SampleRow>) -> OfflineReport {
    let n = rows.len().max(1) as f64;
    OfflineReport {
        samples: rows.len(),
        near_collision_count: rows.iter().filter(|r| r.near_collision).count(),
        mean_deviation: rows.iter().map(|r| r.deviation).sum::<f64>() / n,
        mean_min_clearance: rows.iter().map(|r| r.clearance).sum::<f64>() / n,
        rows,
    }
}

/// Outcome of one closed-loop episode, as used by the aggregate metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub reached_goal: bool,
    pub collisions: usize,
    pub min_clearance: f64,
    pub path_completion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_collisions: f64,
    pub mean_min_clearance: f64,
    pub mean_path_completion: f64,
}

pub fn summarize_episodes(outcomes: &[EpisodeOutcome]) -> EpisodeReport {
    let n = outcomes.len().max(1) as f64;
    EpisodeReport {
        episodes: outcomes.len(),
        success_rate: outcomes.iter().filter(|o| o.reached_goal).count() as f64 / n,
        mean_collisions: outcomes.iter().map(|o| o.collisions as f64).sum::<f64>() / n,
        mean_min_clearance: outcomes.iter().map(|o| o.min_clearance).sum::<f64>() / n,
        mean_path_completion: outcomes.iter().map(|o| o.path_completion).sum::<f64>() / n,
    }
}

/// Offline and closed-loop results side by side.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub offline: Option<OfflineReport>,
    pub episodes: Option<EpisodeReport>,
}

pub const HISTOGRAM_BINS: usize = 50;

/// Uniform-bin histogram over the observed range of `values`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn build(values: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let finite = values.iter().copied().filter(|v| v.is_finite());
        let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
        let mut counts = vec![0; bins];
        if lo > hi {
            return Self { lo: 0.0, hi: 0.0, counts };
        }
        let width = (hi - lo) / bins as f64;
        for &v in values.iter().filter(|v| v.is_finite()) {
            let k = if width > 0.0 {
                (((v - lo) / width) as usize).min(bins - 1)
            } else {
                0
            };
            counts[k] += 1;
        }
        Self { lo, hi, counts }
    }

    pub fn bin_edges(&self) -> Vec<f64> {
        let bins = self.counts.len();
        (0..=bins)
            .map(|k| self.lo + (self.hi - self.lo) * k as f64 / bins as f64)
            .collect()
    }
}
