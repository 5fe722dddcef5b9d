//! Planar poses, trajectories and the shape-preserving transformations used
//! to build counterfactual candidates.
//!
//! Angles are normalized into `(-π, π]` everywhere; `-π` maps to `+π`.

use thiserror::Error;

use crate::scalar::Scalar;

/// Segment or path lengths below this are treated as zero.
pub const LENGTH_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid-argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate-path: endpoint coincides with the ego origin")]
    DegeneratePath,
    #[error("degenerate-target: target coincides with the ego origin, use the stop candidate instead")]
    DegenerateTarget,
    #[error("scale-out-of-range: target requires scale {scale:.4}, outside [{min}, {max}]")]
    ScaleOutOfRange { scale: f64, min: f64, max: f64 },
    #[error("wrong-frame: operation requires an ego_start trajectory")]
    WrongFrame,
}

impl GeometryError {
    pub fn code(&self) -> &'static str {
        match self {
            GeometryError::InvalidArgument(_) => "invalid-argument",
            GeometryError::DegeneratePath => "degenerate-path",
            GeometryError::DegenerateTarget => "degenerate-target",
            GeometryError::ScaleOutOfRange { .. } => "scale-out-of-range",
            GeometryError::WrongFrame => "wrong-frame",
        }
    }
}

/// Normalizes an angle into `(-π, π]`.
pub fn normalize_angle<T: Scalar>(angle: T) -> T {
    let pi = T::PI();
    let two_pi = pi + pi;
    let mut a = angle % two_pi;
    if a > pi {
        a -= two_pi;
    } else if a <= -pi {
        a += two_pi;
    }
    a
}

/// Planar pose `(x, y, theta)` in meters and radians.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose2<T> {
    pub x: T,
    pub y: T,
    pub theta: T,
}

impl<T: Scalar> Pose2<T> {
    /// Creates a pose with `theta` normalized.
    pub fn new(x: T, y: T, theta: T) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn identity() -> Self {
        Self {
            x: T::zero(),
            y: T::zero(),
            theta: T::zero(),
        }
    }

    #[inline]
    pub fn position(&self) -> (T, T) {
        (self.x, self.y)
    }

    #[inline]
    pub fn distance_to(&self, other: &Self) -> T {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    pub fn cast<U: Scalar>(&self) -> Pose2<U> {
        Pose2 {
            x: U::lit(self.x.as_f64()),
            y: U::lit(self.y.as_f64()),
            theta: U::lit(self.theta.as_f64()),
        }
    }
}

/// Frame in which a trajectory's waypoints are expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameTag {
    /// Fixed to the robot pose at planning time.
    EgoStart,
    /// Odometry frame.
    Odom,
}

impl FrameTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            FrameTag::EgoStart => "ego_start",
            FrameTag::Odom => "odom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ego_start" => Some(FrameTag::EgoStart),
            "odom" => Some(FrameTag::Odom),
            _ => None,
        }
    }
}

/// Ordered sequence of waypoints with a frame tag.
///
/// Construction checks that the sequence is non-empty and that every
/// coordinate is finite. The horizon length is checked by the owners of a
/// trajectory (candidate sets, policies), not here.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    waypoints: Vec<Pose2<T>>,
    frame: FrameTag,
}

impl<T: Scalar> Trajectory<T> {
    pub fn new(waypoints: Vec<Pose2<T>>, frame: FrameTag) -> Result<Self, GeometryError> {
        if waypoints.is_empty() {
            return Err(GeometryError::InvalidArgument(
                "trajectory needs at least one waypoint".into(),
            ));
        }
        if let Some(k) = waypoints.iter().position(|p| !p.is_finite()) {
            return Err(GeometryError::InvalidArgument(format!(
                "waypoint {k} has a non-finite coordinate"
            )));
        }
        Ok(Self { waypoints, frame })
    }

    /// Builds an ego-frame trajectory from positions, deriving headings.
    pub fn from_positions(positions: &[(T, T)], frame: FrameTag) -> Result<Self, GeometryError> {
        let headings = heading_from_positions(positions);
        let waypoints = positions
            .iter()
            .zip(headings)
            .map(|(&(x, y), th)| Pose2::new(x, y, th))
            .collect();
        Self::new(waypoints, frame)
    }

    #[inline]
    pub fn waypoints(&self) -> &[Pose2<T>] {
        &self.waypoints
    }

    #[inline]
    pub fn frame(&self) -> FrameTag {
        self.frame
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn positions(&self) -> Vec<(T, T)> {
        self.waypoints.iter().map(Pose2::position).collect()
    }

    pub fn first(&self) -> &Pose2<T> {
        &self.waypoints[0]
    }

    pub fn last(&self) -> &Pose2<T> {
        &self.waypoints[self.waypoints.len() - 1]
    }

    /// Polyline length through the waypoint positions.
    pub fn arc_length(&self) -> T {
        polyline_length(&self.positions())
    }

    pub fn into_waypoints(self) -> Vec<Pose2<T>> {
        self.waypoints
    }

    pub fn cast<U: Scalar>(&self) -> Trajectory<U> {
        Trajectory {
            waypoints: self.waypoints.iter().map(Pose2::cast).collect(),
            frame: self.frame,
        }
    }
}

pub fn polyline_length<T: Scalar>(positions: &[(T, T)]) -> T {
    positions
        .windows(2)
        .fold(T::zero(), |acc, w| acc + (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1))
}

/// Rigid planar transform: rotation followed by translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform2<T> {
    pub tx: T,
    pub ty: T,
    pub rotation: T,
}

impl<T: Scalar> Transform2<T> {
    pub fn new(tx: T, ty: T, rotation: T) -> Self {
        Self {
            tx,
            ty,
            rotation: normalize_angle(rotation),
        }
    }

    pub fn identity() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    /// Transform taking frame-local coordinates into the parent frame of `pose`.
    pub fn from_pose(pose: &Pose2<T>) -> Self {
        Self::new(pose.x, pose.y, pose.theta)
    }

    pub fn apply_point(&self, (x, y): (T, T)) -> (T, T) {
        let (s, c) = self.rotation.sin_cos();
        (c * x - s * y + self.tx, s * x + c * y + self.ty)
    }

    pub fn apply(&self, p: &Pose2<T>) -> Pose2<T> {
        let (x, y) = self.apply_point((p.x, p.y));
        Pose2::new(x, y, p.theta + self.rotation)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        let (tx, ty) = self.apply_point((other.tx, other.ty));
        Self::new(tx, ty, self.rotation + other.rotation)
    }

    pub fn inverse(&self) -> Self {
        let (s, c) = self.rotation.sin_cos();
        Self::new(
            -(c * self.tx + s * self.ty),
            s * self.tx - c * self.ty,
            -self.rotation,
        )
    }
}

/// Expresses an odometry-frame pose in the frame whose origin is `frame_origin`.
pub fn to_frame<T: Scalar>(pose_in_odom: &Pose2<T>, frame_origin: &Pose2<T>) -> Pose2<T> {
    let dx = pose_in_odom.x - frame_origin.x;
    let dy = pose_in_odom.y - frame_origin.y;
    let (s, c) = frame_origin.theta.sin_cos();
    Pose2::new(
        c * dx + s * dy,
        -s * dx + c * dy,
        pose_in_odom.theta - frame_origin.theta,
    )
}

/// Inverse of [`to_frame`].
pub fn from_frame<T: Scalar>(pose_in_frame: &Pose2<T>, frame_origin: &Pose2<T>) -> Pose2<T> {
    Transform2::from_pose(frame_origin).apply(pose_in_frame)
}

/// Heading of each segment `p_i -> p_{i+1}`; the last waypoint copies the
/// previous heading and segments shorter than [`LENGTH_EPS`] inherit the
/// prior heading (the first defaults to zero).
pub fn heading_from_positions<T: Scalar>(positions: &[(T, T)]) -> Vec<T> {
    let eps = T::lit(LENGTH_EPS);
    let mut headings = Vec::with_capacity(positions.len());
    let mut prev = T::zero();
    for w in positions.windows(2) {
        let (dx, dy) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
        if dx.hypot(dy) >= eps {
            prev = normalize_angle(dy.atan2(dx));
        }
        headings.push(prev);
    }
    if !positions.is_empty() {
        headings.push(prev);
    }
    headings
}

/// Rotates an ego-frame trajectory about the ego origin.
pub fn rotate_trajectory<T: Scalar>(
    traj: &Trajectory<T>,
    angle: T,
) -> Result<Trajectory<T>, GeometryError> {
    if traj.frame() != FrameTag::EgoStart {
        return Err(GeometryError::WrongFrame);
    }
    if !angle.is_finite() {
        return Err(GeometryError::InvalidArgument(
            "rotation angle must be finite".into(),
        ));
    }
    let rot = Transform2::new(T::zero(), T::zero(), angle);
    Trajectory::new(
        traj.waypoints().iter().map(|p| rot.apply(p)).collect(),
        FrameTag::EgoStart,
    )
}

/// Resamples a trajectory to `n` waypoints spaced evenly by arc length along
/// its polyline. Headings are recomputed from the resampled positions.
pub fn resample_arclength<T: Scalar>(
    traj: &Trajectory<T>,
    n: usize,
) -> Result<Trajectory<T>, GeometryError> {
    if n < 2 {
        return Err(GeometryError::InvalidArgument(format!(
            "resample count must be at least 2, got {n}"
        )));
    }
    if traj.len() < 2 {
        return Err(GeometryError::InvalidArgument(
            "resampling needs at least two waypoints".into(),
        ));
    }
    let pts = traj.positions();
    let mut cumulative = Vec::with_capacity(pts.len());
    let mut acc = T::zero();
    cumulative.push(acc);
    for w in pts.windows(2) {
        acc += (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
        cumulative.push(acc);
    }
    let total = acc;
    if total < T::lit(LENGTH_EPS) {
        return Trajectory::new(vec![*traj.first(); n], traj.frame());
    }

    let last = pts.len() - 1;
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for k in 0..n {
        if k == n - 1 {
            out.push(pts[last]);
            break;
        }
        let s = total * T::lit(k as f64) / T::lit((n - 1) as f64);
        while seg + 1 < last && cumulative[seg + 1] < s {
            seg += 1;
        }
        let seg_len = cumulative[seg + 1] - cumulative[seg];
        let u = if seg_len > T::zero() {
            ((s - cumulative[seg]) / seg_len).max(T::zero()).min(T::one())
        } else {
            T::zero()
        };
        let (a, b) = (pts[seg], pts[seg + 1]);
        out.push((a.0 + (b.0 - a.0) * u, a.1 + (b.1 - a.1) * u));
    }
    Trajectory::from_positions(&out, traj.frame())
}

/// Accepted similarity scale range for [`reparameterize_to_target`].
pub const MIN_TARGET_SCALE: f64 = 0.1;
pub const MAX_TARGET_SCALE: f64 = 10.0;

/// Maps the path by the similarity transform about the ego origin that takes
/// its final position onto `target`, then resamples it to `n` waypoints.
pub fn reparameterize_to_target<T: Scalar>(
    traj: &Trajectory<T>,
    target: (T, T),
    n: usize,
) -> Result<Trajectory<T>, GeometryError> {
    if traj.frame() != FrameTag::EgoStart {
        return Err(GeometryError::WrongFrame);
    }
    if traj.len() < 2 {
        return Err(GeometryError::InvalidArgument(
            "reparameterization needs at least two waypoints".into(),
        ));
    }
    if !(target.0.is_finite() && target.1.is_finite()) {
        return Err(GeometryError::InvalidArgument(
            "target must be finite".into(),
        ));
    }
    let eps = T::lit(LENGTH_EPS);
    let end = traj.last();
    let end_norm = end.x.hypot(end.y);
    if end_norm < eps {
        return Err(GeometryError::DegeneratePath);
    }
    let target_norm = target.0.hypot(target.1);
    if target_norm < eps {
        return Err(GeometryError::DegenerateTarget);
    }
    let scale = target_norm / end_norm;
    if scale < T::lit(MIN_TARGET_SCALE) || scale > T::lit(MAX_TARGET_SCALE) {
        return Err(GeometryError::ScaleOutOfRange {
            scale: scale.as_f64(),
            min: MIN_TARGET_SCALE,
            max: MAX_TARGET_SCALE,
        });
    }
    let rotation = target.1.atan2(target.0) - end.y.atan2(end.x);
    let (s, c) = rotation.sin_cos();
    let mapped: Vec<(T, T)> = traj
        .waypoints()
        .iter()
        .map(|p| (scale * (c * p.x - s * p.y), scale * (s * p.x + c * p.y)))
        .collect();
    let mut out = resample_arclength(&Trajectory::from_positions(&mapped, FrameTag::EgoStart)?, n)?
        .into_waypoints();
    // Pin the endpoint exactly; the similarity hits it up to rounding.
    let last = out.len() - 1;
    out[last].x = target.0;
    out[last].y = target.1;
    Trajectory::new(out, FrameTag::EgoStart)
}
