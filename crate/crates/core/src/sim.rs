//! 2D navigation world: static walls and pillars, scripted pedestrians,
//! simulated lidar, a unicycle robot, a noisy teleoperation surrogate for
//! producing demonstrations, and a deterministic preference oracle.

use serde::{Deserialize, Serialize};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::counterfactual::{candidate_pairs, AnnotatorInput, CandidateKind, CandidateSet};
use crate::geometry::{from_frame, normalize_angle, reparameterize_to_target, to_frame, FrameTag, Pose2, Trajectory};
use crate::preference::{PreferenceRecord, Source};
use crate::metrics::LaserScan;

pub type Point = (f64, f64);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: Point,
    pub b: Point,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Circle {
    pub center: Point,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: Point,
    pub max: Point,
}

impl Bounds {
    pub fn contains(&self, p: Point) -> bool {
        p.0 >= self.min.0 && p.0 <= self.max.0 && p.1 >= self.min.1 && p.1 <= self.max.1
    }
}

/// Pedestrian walking an open waypoint polyline once at constant speed, then
/// standing at its last waypoint.
///
/// Arc length at time `t` is `speed * max(0, t + phase)`, so a negative phase
/// holds the agent at its first waypoint until `t = -phase`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicAgent {
    pub waypoints: Vec<Point>,
    pub speed: f64,
    pub radius: f64,
    pub phase: f64,
}

impl DynamicAgent {
    pub fn position(&self, t: f64) -> Point {
        let pts = &self.waypoints;
        if pts.len() < 2 || self.speed <= 0.0 {
            return pts.first().copied().unwrap_or((0.0, 0.0));
        }
        let mut s = self.speed * (t + self.phase).max(0.0);
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let len = (b.0 - a.0).hypot(b.1 - a.1);
            if s <= len {
                let u = if len > 0.0 { s / len } else { 0.0 };
                return (a.0 + (b.0 - a.0) * u, a.1 + (b.1 - a.1) * u);
            }
            s -= len;
        }
        pts[pts.len() - 1]
    }

    pub fn disc(&self, t: f64) -> Circle {
        Circle {
            center: self.position(t),
            radius: self.radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub static_segments: Vec<Segment>,
    pub static_circles: Vec<Circle>,
    pub agents: Vec<DynamicAgent>,
    pub bounds: Bounds,
}

fn point_segment_distance(p: Point, s: &Segment) -> f64 {
    let (dx, dy) = (s.b.0 - s.a.0, s.b.1 - s.a.1);
    let len2 = dx * dx + dy * dy;
    let u = if len2 > 0.0 {
        (((p.0 - s.a.0) * dx + (p.1 - s.a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.0 - s.a.0 - u * dx).hypot(p.1 - s.a.1 - u * dy)
}

fn ray_segment(origin: Point, dir: Point, s: &Segment) -> Option<f64> {
    let e = (s.b.0 - s.a.0, s.b.1 - s.a.1);
    let denom = dir.0 * e.1 - dir.1 * e.0;
    if denom.abs() < 1e-12 {
        return None;
    }
    let w = (s.a.0 - origin.0, s.a.1 - origin.1);
    let t = (w.0 * e.1 - w.1 * e.0) / denom;
    let u = (w.0 * dir.1 - w.1 * dir.0) / denom;
    (t > 1e-9 && (0.0..=1.0).contains(&u)).then_some(t)
}

fn ray_circle(origin: Point, dir: Point, c: &Circle) -> Option<f64> {
    let f = (origin.0 - c.center.0, origin.1 - c.center.1);
    let b = f.0 * dir.0 + f.1 * dir.1;
    let cc = f.0 * f.0 + f.1 * f.1 - c.radius * c.radius;
    let disc = b * b - cc;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    [-b - sq, -b + sq].into_iter().find(|&t| t > 1e-9)
}

/// Smallest reported range; a sensor touching an obstacle still reads positive.
const MIN_RANGE: f64 = 1e-3;

impl World {
    pub fn empty(bounds: Bounds) -> Self {
        Self {
            static_segments: Vec::new(),
            static_circles: Vec::new(),
            agents: Vec::new(),
            bounds,
        }
    }

    /// Distance from `p` to the nearest static surface.
    pub fn static_clearance(&self, p: Point) -> f64 {
        let segs = self
            .static_segments
            .iter()
            .map(|s| point_segment_distance(p, s));
        let circles = self
            .static_circles
            .iter()
            .map(|c| (p.0 - c.center.0).hypot(p.1 - c.center.1) - c.radius);
        segs.chain(circles).fold(f64::INFINITY, f64::min)
    }

    /// Distance from `p` to the nearest surface, agents included, at time `t`.
    pub fn clearance(&self, p: Point, t: f64) -> f64 {
        self.agents
            .iter()
            .map(|a| {
                let c = a.position(t);
                (p.0 - c.0).hypot(p.1 - c.1) - a.radius
            })
            .fold(self.static_clearance(p), f64::min)
    }

    /// Closest static surface points within `within` of `p`, with distances.
    /// Segments sharing a corner report that corner once.
    fn static_surfaces(&self, p: Point, within: f64) -> Vec<(Point, f64)> {
        let mut out = Vec::new();
        for s in &self.static_segments {
            let (dx, dy) = (s.b.0 - s.a.0, s.b.1 - s.a.1);
            let len2 = dx * dx + dy * dy;
            let u = if len2 > 0.0 {
                (((p.0 - s.a.0) * dx + (p.1 - s.a.1) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let q = (s.a.0 + u * dx, s.a.1 + u * dy);
            let d = (p.0 - q.0).hypot(p.1 - q.1);
            let seen = out.iter().any(|(o, _): &(Point, f64)| (o.0 - q.0).hypot(o.1 - q.1) < 1e-9);
            if d < within && !seen {
                out.push((q, d));
            }
        }
        for c in &self.static_circles {
            let (vx, vy) = (p.0 - c.center.0, p.1 - c.center.1);
            let dc = vx.hypot(vy);
            let d = dc - c.radius;
            if d < within && dc > 0.0 {
                let q = (c.center.0 + vx / dc * c.radius, c.center.1 + vy / dc * c.radius);
                out.push((q, d));
            }
        }
        out
    }
}

/// Lidar geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarConfig {
    pub n_beams: usize,
    pub fov: f64,
    pub max_range: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            n_beams: 64,
            fov: 270f64.to_radians(),
            max_range: 10.0,
        }
    }
}

impl LidarConfig {
    pub fn angle_min(&self) -> f64 {
        if self.n_beams <= 1 {
            0.0
        } else {
            -self.fov / 2.0
        }
    }

    pub fn angle_increment(&self) -> f64 {
        let full = self.fov >= std::f64::consts::TAU - 1e-12;
        match self.n_beams {
            0 | 1 => 0.0,
            n if full => self.fov / n as f64,
            n => self.fov / (n - 1) as f64,
        }
    }
}

/// Casts `n_beams` rays from `pose` against static geometry and agent discs at `t`.
pub fn cast_scan(world: &World, pose: &Pose2<f64>, lidar: &LidarConfig, t: f64) -> LaserScan<f64> {
    let angle_min = lidar.angle_min();
    let inc = lidar.angle_increment();
    let origin = (pose.x, pose.y);
    let agents: Vec<Circle> = world.agents.iter().map(|a| a.disc(t)).collect();
    let ranges = (0..lidar.n_beams.max(1))
        .map(|k| {
            let a = pose.theta + angle_min + inc * k as f64;
            let dir = (a.cos(), a.sin());
            let hit = world
                .static_segments
                .iter()
                .filter_map(|s| ray_segment(origin, dir, s))
                .chain(
                    world
                        .static_circles
                        .iter()
                        .chain(&agents)
                        .filter_map(|c| ray_circle(origin, dir, c)),
                )
                .fold(lidar.max_range, f64::min);
            hit.max(MIN_RANGE)
        })
        .collect();
    LaserScan {
        angle_min,
        angle_increment: inc,
        ranges,
        max_range: lidar.max_range,
    }
}

/// Velocity limits of the unicycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotLimits {
    pub v_max: f64,
    pub omega_max: f64,
}

impl Default for RobotLimits {
    fn default() -> Self {
        Self {
            v_max: 1.0,
            omega_max: std::f64::consts::PI,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotState {
    pub pose: Pose2<f64>,
    pub v: f64,
    pub omega: f64,
}

impl RobotState {
    pub fn at(pose: Pose2<f64>) -> Self {
        Self {
            pose,
            v: 0.0,
            omega: 0.0,
        }
    }
}

/// Explicit Euler unicycle step with commands clamped to `limits`.
pub fn step_robot(state: &RobotState, cmd: (f64, f64), dt: f64, limits: &RobotLimits) -> RobotState {
    let v = cmd.0.clamp(-limits.v_max, limits.v_max);
    let omega = cmd.1.clamp(-limits.omega_max, limits.omega_max);
    let p = state.pose;
    RobotState {
        pose: Pose2::new(
            p.x + v * p.theta.cos() * dt,
            p.y + v * p.theta.sin() * dt,
            p.theta + omega * dt,
        ),
        v,
        omega,
    }
}

/// True when the robot disc strictly overlaps static geometry or an agent.
pub fn check_collision(world: &World, pose: &Pose2<f64>, robot_radius: f64, t: f64) -> bool {
    world.clearance((pose.x, pose.y), t) < robot_radius
}

/// Index of the first agent overlapping the robot disc, if any.
pub fn colliding_agent(world: &World, pose: &Pose2<f64>, robot_radius: f64, t: f64) -> Option<usize> {
    world.agents.iter().position(|a| {
        let c = a.position(t);
        (pose.x - c.0).hypot(pose.y - c.1) < robot_radius + a.radius
    })
}

pub fn static_collision(world: &World, pose: &Pose2<f64>, robot_radius: f64) -> bool {
    world.static_clearance((pose.x, pose.y)) < robot_radius
}

/// Evaluation scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScenarioId {
    OpenSpace,
    GlassCorridor,
    NarrowPassage,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 3] = [
        ScenarioId::OpenSpace,
        ScenarioId::GlassCorridor,
        ScenarioId::NarrowPassage,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioId::OpenSpace => "open_space",
            ScenarioId::GlassCorridor => "glass_corridor",
            ScenarioId::NarrowPassage => "narrow_passage",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.as_str() == s)
    }
}

impl std::fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: ScenarioId,
    pub world: World,
    pub start: Pose2<f64>,
    pub goal: Point,
}

/// Free width between the desk rows of the narrow passage.
pub const NARROW_PASSAGE_WIDTH: f64 = 1.4;

fn seg(a: Point, b: Point) -> Segment {
    Segment { a, b }
}

fn pillar(x: f64, y: f64, r: f64) -> Circle {
    Circle {
        center: (x, y),
        radius: r,
    }
}

fn walker(waypoints: &[Point], speed: f64, phase: f64) -> DynamicAgent {
    DynamicAgent {
        waypoints: waypoints.to_vec(),
        speed,
        radius: 0.2,
        phase,
    }
}

/// Builds one of the three evaluation scenes. The robot starts at the origin
/// facing +x; goals lie ahead along +x.
pub fn build_scenario(id: ScenarioId) -> Scenario {
    match id {
        ScenarioId::OpenSpace => {
            // Room with free space on the right (-y) and an exit corridor on
            // the left (+y). A person starts just past the goal and walks
            // toward the robot.
            let world = World {
                static_segments: vec![
                    seg((-2.0, -4.0), (11.0, -4.0)),
                    seg((-2.0, 3.0), (4.0, 3.0)),
                    seg((6.0, 3.0), (11.0, 3.0)),
                    seg((4.0, 3.0), (4.0, 7.0)),
                    seg((6.0, 3.0), (6.0, 7.0)),
                    seg((-2.0, -4.0), (-2.0, 3.0)),
                    seg((11.0, -4.0), (11.0, 3.0)),
                ],
                static_circles: vec![pillar(4.0, -1.6, 0.4), pillar(7.0, 1.8, 0.3)],
                agents: vec![walker(&[(9.2, 0.15), (-1.5, 0.15)], 0.7, 0.0)],
                bounds: Bounds {
                    min: (-2.0, -4.0),
                    max: (11.0, 7.0),
                },
            };
            Scenario {
                id,
                world,
                start: Pose2::identity(),
                goal: (8.0, 0.0),
            }
        }
        ScenarioId::GlassCorridor => {
            // Glass wall on the left (+y), pillar row on the right (-y) in
            // front of a solid wall; two people approach in opposite lanes.
            let mut circles = Vec::new();
            for k in 0..6 {
                circles.push(pillar(1.0 + 2.0 * k as f64, -1.05, 0.25));
            }
            let world = World {
                static_segments: vec![
                    seg((-1.5, 1.2), (13.0, 1.2)),
                    seg((-1.5, -1.6), (13.0, -1.6)),
                    seg((-1.5, -1.6), (-1.5, 1.2)),
                    seg((13.0, -1.6), (13.0, 1.2)),
                ],
                static_circles: circles,
                agents: vec![
                    walker(&[(12.0, 0.45), (-1.0, 0.45)], 0.6, 0.0),
                    walker(&[(12.5, -0.4), (-1.0, -0.4)], 0.6, -5.0),
                ],
                bounds: Bounds {
                    min: (-1.5, -1.6),
                    max: (13.0, 1.2),
                },
            };
            Scenario {
                id,
                world,
                start: Pose2::identity(),
                goal: (10.0, 0.0),
            }
        }
        ScenarioId::NarrowPassage => {
            // Desk rows bounding a straight passage; two people enter from
            // the far end one after another, each off-center on opposite
            // sides, and step aside once out of the passage.
            let half = NARROW_PASSAGE_WIDTH / 2.0;
            let world = World {
                static_segments: vec![
                    seg((2.0, half), (8.0, half)),
                    seg((2.0, -half), (8.0, -half)),
                    seg((2.0, half), (2.0, 2.5)),
                    seg((2.0, -half), (2.0, -2.5)),
                    seg((8.0, half), (8.0, 2.5)),
                    seg((8.0, -half), (8.0, -2.5)),
                    seg((-1.5, 2.5), (11.5, 2.5)),
                    seg((-1.5, -2.5), (11.5, -2.5)),
                    seg((-1.5, -2.5), (-1.5, 2.5)),
                    seg((11.5, -2.5), (11.5, 2.5)),
                ],
                static_circles: Vec::new(),
                agents: vec![
                    walker(&[(10.0, 0.35), (1.6, 0.35), (1.0, 2.2)], 0.5, -2.0),
                    walker(&[(10.5, -0.35), (1.6, -0.35), (1.0, -2.2)], 0.5, -9.0),
                ],
                bounds: Bounds {
                    min: (-1.5, -2.5),
                    max: (11.5, 2.5),
                },
            };
            Scenario {
                id,
                world,
                start: Pose2::identity(),
                goal: (9.5, 0.0),
            }
        }
    }
}

/// One recorded observation.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorFrame {
    pub observation_id: String,
    pub scan: LaserScan<f64>,
    /// Goal relative to the robot, robot frame.
    pub goal: Point,
    pub stamp: f64,
}

/// Observation plus the trajectory the teleoperated robot actually executed.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub frame: SensorFrame,
    pub executed: Trajectory<f64>,
    /// Robot pose in the world when the frame was recorded.
    pub pose: Pose2<f64>,
    pub scenario: ScenarioId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeleopEpisode {
    pub demonstrations: Vec<Demonstration>,
    /// Every simulated pose, one per control tick.
    pub poses: Vec<Pose2<f64>>,
    pub reached_goal: bool,
    /// Step budget ran out before the goal was reached.
    pub truncated: bool,
}

/// Noisy, lagged scripted driver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeleopConfig {
    pub sigma_v: f64,
    pub sigma_omega: f64,
    /// Commands take effect this many control ticks after they are issued.
    pub lag_ticks: usize,
    /// AR(1) coefficient of the command noise; 0 gives white noise.
    pub noise_correlation: f64,
    pub dt: f64,
    pub cruise_speed: f64,
    pub heading_gain: f64,
    /// Obstacles closer than this push the desired heading away.
    pub influence: f64,
    pub repulsion_gain: f64,
    /// Pedestrians are avoided where they will be this far ahead in time.
    pub agent_lookahead: f64,
    pub agent_influence: f64,
    /// Sideways push that makes the driver keep right of oncoming people.
    pub pass_bias: f64,
    pub goal_tolerance: f64,
    pub max_steps: usize,
    /// Control ticks between recorded observations.
    pub sample_every: usize,
    /// Control ticks between consecutive trajectory waypoints.
    pub waypoint_ticks: usize,
    pub horizon: usize,
    pub lidar: LidarConfig,
    pub limits: RobotLimits,
}

impl Default for TeleopConfig {
    fn default() -> Self {
        Self {
            sigma_v: 0.1,
            sigma_omega: 0.3,
            lag_ticks: 3,
            noise_correlation: 0.97,
            dt: 0.05,
            cruise_speed: 0.8,
            heading_gain: 1.2,
            influence: 1.2,
            repulsion_gain: 1.0,
            agent_lookahead: 2.0,
            agent_influence: 2.0,
            pass_bias: 0.8,
            goal_tolerance: 0.2,
            max_steps: 1200,
            sample_every: 8,
            waypoint_ticks: 5,
            horizon: 8,
            lidar: LidarConfig::default(),
            limits: RobotLimits::default(),
        }
    }
}

impl TeleopConfig {
    pub fn noiseless(&self) -> Self {
        Self {
            sigma_v: 0.0,
            sigma_omega: 0.0,
            lag_ticks: 0,
            ..*self
        }
    }
}

const HEAD_ON_OFFSET: f64 = 0.15;

/// Goal-seeking potential-field command, before noise.
fn teleop_command(world: &World, pose: &Pose2<f64>, goal: Point, t: f64, cfg: &TeleopConfig) -> (f64, f64) {
    let (gx, gy) = (goal.0 - pose.x, goal.1 - pose.y);
    let dist = gx.hypot(gy);
    let mut dir = if dist > 0.0 { (gx / dist, gy / dist) } else { (0.0, 0.0) };
    let mut closest = f64::INFINITY;
    for (q, d) in world.static_surfaces((pose.x, pose.y), cfg.influence) {
        closest = closest.min(d);
        let d = d.max(0.05);
        let push = cfg.repulsion_gain * (1.0 / d - 1.0 / cfg.influence);
        dir.0 += push * (pose.x - q.0) / d;
        dir.1 += push * (pose.y - q.1) / d;
    }
    for agent in &world.agents {
        for (k, tau) in [0.0, cfg.agent_lookahead].into_iter().enumerate() {
            let c = agent.position(t + tau);
            let (ax, ay) = (pose.x - c.0, pose.y - c.1);
            let dc = ax.hypot(ay).max(1e-6);
            let d = dc - agent.radius;
            if k == 0 {
                closest = closest.min(d);
            }
            if d >= cfg.agent_influence {
                continue;
            }
            let (ux, uy) = (ax / dc, ay / dc);
            let (hx, hy) = (pose.theta.cos(), pose.theta.sin());
            let push = cfg.repulsion_gain * (1.0 / d.max(0.05) - 1.0 / cfg.agent_influence);
            // People in front are passed sideways rather than backed away from.
            let along = ux * hx + uy * hy;
            let ahead = (-along).max(0.0);
            let (lx, ly) = (ux - ahead * along * hx, uy - ahead * along * hy);
            // Near head-on encounters default to passing on the right.
            let offset = (hx * ay - hy * ax).abs();
            let bias = cfg.pass_bias * ahead * (1.0 - offset / HEAD_ON_OFFSET).max(0.0);
            dir.0 += push * (lx - bias * uy);
            dir.1 += push * (ly + bias * ux);
        }
    }
    let bearing = dir.1.atan2(dir.0);
    let err = normalize_angle(bearing - pose.theta);
    let omega = cfg.heading_gain * err;
    let slow_obstacle = ((closest - 0.15) / 0.6).clamp(0.5, 1.0);
    let v = cfg.cruise_speed * err.cos().max(0.0) * slow_obstacle;
    (v, omega)
}

/// Drives the robot from `start` toward `goal` with a noisy lagged
/// potential-field controller and records an observation every
/// `sample_every` ticks together with the next `horizon` executed waypoints
/// in the ego frame.
pub fn teleop_surrogate<R: Rng + ?Sized>(
    scenario: &Scenario,
    start: Pose2<f64>,
    cfg: &TeleopConfig,
    id_prefix: &str,
    rng: &mut R,
) -> TeleopEpisode {
    let world = &scenario.world;
    let goal = scenario.goal;
    let noise_v = Normal::new(0.0, cfg.sigma_v.max(0.0)).expect("finite sigma");
    let noise_w = Normal::new(0.0, cfg.sigma_omega.max(0.0)).expect("finite sigma");
    let rho = cfg.noise_correlation.clamp(0.0, 0.999);
    let innovation = (1.0 - rho * rho).sqrt();

    let mut state = RobotState::at(start);
    let mut poses = vec![start];
    let mut pending: std::collections::VecDeque<(f64, f64)> =
        std::iter::repeat_n((0.0, 0.0), cfg.lag_ticks).collect();
    let (mut nv, mut nw) = (0.0, 0.0);
    let mut reached_goal = false;

    for step in 0..cfg.max_steps {
        let t = step as f64 * cfg.dt;
        if (state.pose.x - goal.0).hypot(state.pose.y - goal.1) < cfg.goal_tolerance {
            reached_goal = true;
            break;
        }
        let (v, w) = teleop_command(world, &state.pose, goal, t, cfg);
        nv = rho * nv + innovation * noise_v.sample(rng);
        nw = rho * nw + innovation * noise_w.sample(rng);
        pending.push_back(((v + nv).max(0.0), w + nw));
        let cmd = pending.pop_front().expect("queue holds lag + 1 commands");
        state = step_robot(&state, cmd, cfg.dt, &cfg.limits);
        poses.push(state.pose);
    }
    if !reached_goal {
        let last = poses.last().expect("start pose");
        reached_goal = (last.x - goal.0).hypot(last.y - goal.1) < cfg.goal_tolerance;
    }

    // The driver does not brake at the goal: it keeps going through it, so
    // trajectories recorded just before arrival extend past the goal.
    let mut tail = poses.clone();
    if reached_goal {
        let p = state.pose;
        let beyond = (goal.0 + 3.0 * p.theta.cos(), goal.1 + 3.0 * p.theta.sin());
        for step in 0..cfg.horizon * cfg.waypoint_ticks {
            let t = (poses.len() + step) as f64 * cfg.dt;
            let (v, w) = teleop_command(world, &state.pose, beyond, t, cfg);
            nv = rho * nv + innovation * noise_v.sample(rng);
            nw = rho * nw + innovation * noise_w.sample(rng);
            pending.push_back(((v + nv).max(0.0), w + nw));
            let cmd = pending.pop_front().expect("queue holds lag + 1 commands");
            state = step_robot(&state, cmd, cfg.dt, &cfg.limits);
            tail.push(state.pose);
        }
    }

    let mut demonstrations = Vec::new();
    let last = poses.len() - 1;
    let tail_last = tail.len() - 1;
    let mut k = 0;
    while k < last {
        let pose = poses[k];
        let t = k as f64 * cfg.dt;
        let waypoints: Vec<Pose2<f64>> = (1..=cfg.horizon)
            .map(|i| to_frame(&tail[(k + i * cfg.waypoint_ticks).min(tail_last)], &pose))
            .collect();
        let executed = Trajectory::new(waypoints, FrameTag::EgoStart).expect("finite poses");
        let g = to_frame(&Pose2::new(goal.0, goal.1, 0.0), &pose);
        demonstrations.push(Demonstration {
            frame: SensorFrame {
                observation_id: format!("{id_prefix}-{k:05}"),
                scan: cast_scan(world, &pose, &cfg.lidar, t),
                goal: (g.x, g.y),
                stamp: t,
            },
            executed,
            pose,
            scenario: scenario.id,
        });
        k += cfg.sample_every.max(1);
    }

    TeleopEpisode {
        demonstrations,
        truncated: !reached_goal,
        reached_goal,
        poses,
    }
}

/// Deterministic preference oracle parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    /// Weight of goal progress relative to clearance.
    pub lambda: f64,
    pub robot_radius: f64,
    pub interp_step: f64,
    /// Seconds of pedestrian motion anticipated per waypoint index; 0 freezes
    /// people where they are at the observation time.
    pub agent_lookahead_per_waypoint: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            robot_radius: 0.2,
            interp_step: 0.05,
            agent_lookahead_per_waypoint: 0.1,
        }
    }
}

/// Oracle score of one candidate. Tiers order first: colliding candidates
/// rank below stopping, and stopping ranks below every safe moving candidate.
/// Within a tier the value decides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleScore {
    Collides,
    /// Stop candidate, valued by the current standoff distance.
    Stop(f64),
    /// Safe moving candidate: minimum clearance plus weighted goal progress.
    Safe(f64),
}

impl OracleScore {
    fn rank(&self) -> (u8, f64) {
        match self {
            OracleScore::Collides => (0, f64::NEG_INFINITY),
            OracleScore::Stop(v) => (1, *v),
            OracleScore::Safe(v) => (2, *v),
        }
    }

    /// `Some(true)` when `self` beats `other`, `None` on an exact tie.
    pub fn beats(&self, other: &OracleScore) -> Option<bool> {
        let (a, b) = (self.rank(), other.rank());
        match a.partial_cmp(&b) {
            Some(std::cmp::Ordering::Greater) => Some(true),
            Some(std::cmp::Ordering::Less) => Some(false),
            _ => None,
        }
    }
}

/// Scores a candidate given as ego-frame waypoints from `robot_pose`.
pub fn oracle_score(
    kind: CandidateKind,
    traj: &Trajectory<f64>,
    world: &World,
    robot_pose: &Pose2<f64>,
    goal: Point,
    t: f64,
    cfg: &OracleConfig,
) -> OracleScore {
    let here = (robot_pose.x, robot_pose.y);
    if kind == CandidateKind::Stop {
        return OracleScore::Stop(world.clearance(here, t));
    }
    let world_pts: Vec<Point> = traj
        .waypoints()
        .iter()
        .map(|p| from_frame(p, robot_pose).position())
        .collect();
    let mut clearance = f64::INFINITY;
    let mut check = |p: Point, time: f64| {
        let c = world.clearance(p, time);
        clearance = clearance.min(c);
        c >= cfg.robot_radius
    };
    let stamp = |k: usize| t + (k + 1) as f64 * cfg.agent_lookahead_per_waypoint;
    if let Some(&first) = world_pts.first() {
        if !check(first, stamp(0)) {
            return OracleScore::Collides;
        }
    }
    for (k, w) in world_pts.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let pieces = ((b.0 - a.0).hypot(b.1 - a.1) / cfg.interp_step).ceil().max(1.0) as usize;
        for i in 1..=pieces {
            let u = i as f64 / pieces as f64;
            let p = (a.0 + (b.0 - a.0) * u, a.1 + (b.1 - a.1) * u);
            if !check(p, stamp(k) + u * cfg.agent_lookahead_per_waypoint) {
                return OracleScore::Collides;
            }
        }
    }
    let end = world_pts.last().copied().unwrap_or(here);
    let progress = (here.0 - goal.0).hypot(here.1 - goal.1) - (end.0 - goal.0).hypot(end.1 - goal.1);
    OracleScore::Safe(clearance + cfg.lambda * progress)
}

/// Returns `true` when candidate `i` is preferred over `j`; exact ties favor
/// the lower index.
#[allow(clippy::too_many_arguments)]
pub fn oracle_prefer(
    cs: &CandidateSet<f64>,
    i: usize,
    j: usize,
    world: &World,
    robot_pose: &Pose2<f64>,
    goal: Point,
    t: f64,
    cfg: &OracleConfig,
) -> bool {
    let score = |k: usize| {
        let c = &cs.candidates()[k];
        oracle_score(c.kind, &c.trajectory, world, robot_pose, goal, t, cfg)
    };
    score(i).beats(&score(j)).unwrap_or(i < j)
}

/// Scripted stand-in for the annotator who clicks targets: searches a fan of
/// endpoints around the recorded one and clicks the best by oracle score, or
/// asks to stop when no re-aimed path is collision-free.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetProviderConfig {
    /// Half-width of the endpoint fan, radians.
    pub fan_half_angle: f64,
    pub fan_steps: usize,
    /// Endpoint distances tried, as multiples of the recorded one.
    pub scales: [f64; 3],
    /// Recorded paths shorter than this cannot be re-aimed.
    pub min_path_length: f64,
}

impl Default for TargetProviderConfig {
    fn default() -> Self {
        Self {
            fan_half_angle: 60f64.to_radians(),
            fan_steps: 12,
            scales: [1.0, 0.75, 1.25],
            min_path_length: 0.05,
        }
    }
}

/// Chooses the annotator input for one observation, in the ego frame.
pub fn oracle_target(
    dataset: &Trajectory<f64>,
    world: &World,
    robot_pose: &Pose2<f64>,
    goal: Point,
    t: f64,
    oracle: &OracleConfig,
    cfg: &TargetProviderConfig,
) -> AnnotatorInput<f64> {
    if dataset.arc_length() < cfg.min_path_length {
        return AnnotatorInput::Stop;
    }
    let end = dataset.last().position();
    let r = end.0.hypot(end.1);
    if r < cfg.min_path_length {
        return AnnotatorInput::Stop;
    }
    let bearing = end.1.atan2(end.0);
    let mut best: Option<(f64, Point)> = None;
    // Offsets 0, +d, -d, +2d, ... so exact ties keep the smaller deflection.
    let step = cfg.fan_half_angle / cfg.fan_steps.max(1) as f64;
    let offsets = std::iter::once(0.0).chain((1..=cfg.fan_steps).flat_map(|k| {
        let a = step * k as f64;
        [a, -a]
    }));
    for alpha in offsets {
        for &scale in &cfg.scales {
            let target = (
                scale * r * (bearing + alpha).cos(),
                scale * r * (bearing + alpha).sin(),
            );
            let Ok(traj) = reparameterize_to_target(dataset, target, dataset.len()) else {
                continue;
            };
            if let OracleScore::Safe(score) =
                oracle_score(CandidateKind::HumanTarget, &traj, world, robot_pose, goal, t, oracle)
            {
                if best.is_none_or(|(b, _)| score > b) {
                    best = Some((score, target));
                }
            }
        }
    }
    match best {
        Some((_, target)) => AnnotatorInput::Target(target),
        None => AnnotatorInput::Stop,
    }
}

/// Labels every unordered pair of `cs` with the oracle.
pub fn auto_annotate(
    cs: &CandidateSet<f64>,
    world: &World,
    robot_pose: &Pose2<f64>,
    goal: Point,
    t: f64,
    oracle: &OracleConfig,
    annotator_id: &str,
) -> Vec<PreferenceRecord> {
    candidate_pairs(cs.len())
        .into_iter()
        .map(|(i, j)| PreferenceRecord {
            observation_id: cs.observation_id().to_owned(),
            i,
            j,
            preferred_i: oracle_prefer(cs, i, j, world, robot_pose, goal, t, oracle),
            annotator_id: annotator_id.to_owned(),
            source: Source::Oracle,
        })
        .collect()
}

/// Seeded start-pose jitter used to diversify episodes of one scenario.
pub fn jittered_start(scenario: &Scenario, seed: u64, lateral: f64, heading: f64) -> Pose2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dy = rng.random_range(-lateral..=lateral);
    let dth = rng.random_range(-heading..=heading);
    let s = scenario.start;
    Pose2::new(s.x, s.y + dy, s.theta + dth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counterfactual::{generate_for_observation, GenConfig};
    use crate::metrics::{min_clearance, scan_to_points, MetricConfig};
    use std::f64::consts::PI;

    fn open_bounds() -> Bounds {
        Bounds {
            min: (-20.0, -20.0),
            max: (20.0, 20.0),
        }
    }

    fn forward_beam() -> LidarConfig {
        LidarConfig {
            n_beams: 1,
            fov: 0.1,
            max_range: 10.0,
        }
    }

    #[test]
    fn empty_world_scan() {
        let w = World::empty(open_bounds());
        let scan = cast_scan(&w, &Pose2::identity(), &LidarConfig::default(), 0.0);
        assert_eq!(scan.ranges.len(), 64);
        assert!(scan.ranges.iter().all(|&r| r == 10.0));
        assert!(scan.validate().is_ok());
    }

    #[test]
    fn wall_and_disc_ranges() {
        let mut w = World::empty(open_bounds());
        w.static_segments.push(Segment {
            a: (2.0, -5.0),
            b: (2.0, 5.0),
        });
        let scan = cast_scan(&w, &Pose2::identity(), &forward_beam(), 0.0);
        assert!((scan.ranges[0] - 2.0).abs() < 1e-12);

        let mut w = World::empty(open_bounds());
        w.static_circles.push(Circle {
            center: (3.0, 0.0),
            radius: 1.0,
        });
        let scan = cast_scan(&w, &Pose2::identity(), &forward_beam(), 0.0);
        assert!((scan.ranges[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn scan_follows_moving_agent() {
        let mut w = World::empty(open_bounds());
        w.agents.push(DynamicAgent {
            waypoints: vec![(5.0, 0.0), (3.0, 0.0)],
            speed: 1.0,
            radius: 0.5,
            phase: 0.0,
        });
        let at0 = cast_scan(&w, &Pose2::identity(), &forward_beam(), 0.0);
        let at1 = cast_scan(&w, &Pose2::identity(), &forward_beam(), 1.0);
        assert!((at0.ranges[0] - 4.5).abs() < 1e-12);
        assert!((at1.ranges[0] - 3.5).abs() < 1e-12);
    }

    #[test]
    fn agent_single_pass_and_delay() {
        let a = DynamicAgent {
            waypoints: vec![(0.0, 0.0), (2.0, 0.0)],
            speed: 1.0,
            radius: 0.2,
            phase: -1.0,
        };
        assert_eq!(a.position(0.5), (0.0, 0.0));
        assert_eq!(a.position(2.0), (1.0, 0.0));
        assert_eq!(a.position(2.5), (1.5, 0.0));
        assert_eq!(a.position(40.0), (2.0, 0.0));
        let still = DynamicAgent { speed: 0.0, ..a.clone() };
        assert_eq!(still.position(10.0), (0.0, 0.0));
    }

    #[test]
    fn unicycle_steps() {
        let lim = RobotLimits::default();
        let s = step_robot(&RobotState::at(Pose2::identity()), (1.0, 0.0), 0.1, &lim);
        assert!((s.pose.x - 0.1).abs() < 1e-15 && s.pose.y == 0.0 && s.pose.theta == 0.0);

        let s = step_robot(&RobotState::at(Pose2::identity()), (0.0, PI), 1.0, &lim);
        assert!((s.pose.theta - PI).abs() < 1e-12);

        let clamped = step_robot(&RobotState::at(Pose2::identity()), (5.0, 0.0), 1.0, &lim);
        assert_eq!(clamped.v, 1.0);
    }

    #[test]
    fn collision_boundary() {
        let w = World::empty(open_bounds());
        assert!(!check_collision(&w, &Pose2::identity(), 0.2, 0.0));

        let mut w = World::empty(open_bounds());
        w.agents.push(DynamicAgent {
            waypoints: vec![(0.0, 0.0)],
            speed: 0.0,
            radius: 0.3,
            phase: 0.0,
        });
        assert!(check_collision(&w, &Pose2::identity(), 0.2, 0.0));
        w.agents[0].waypoints = vec![(0.5, 0.0)];
        assert!(!check_collision(&w, &Pose2::identity(), 0.2, 0.0));
        w.agents[0].waypoints = vec![(0.49, 0.0)];
        assert!(check_collision(&w, &Pose2::identity(), 0.2, 0.0));
    }

    #[test]
    fn scenarios_are_deterministic_and_shaped() {
        for id in ScenarioId::ALL {
            assert_eq!(build_scenario(id), build_scenario(id));
            assert_eq!(ScenarioId::parse(id.as_str()), Some(id));
        }
        let open = build_scenario(ScenarioId::OpenSpace);
        assert_eq!(open.world.agents.len(), 1);
        let line: Vec<Point> = (0..=200).map(|k| (open.goal.0 * k as f64 / 200.0, 0.0)).collect();
        assert!(line.iter().all(|&p| open.world.clearance(p, 0.0) >= 0.2));

        let corridor = build_scenario(ScenarioId::GlassCorridor);
        assert!(corridor.world.static_circles.len() >= 2);
        assert_eq!(corridor.world.agents.len(), 2);
    }

    #[test]
    fn narrow_passage_blocks_the_center() {
        let robot_width = MetricConfig::default().robot_width;
        let sc = build_scenario(ScenarioId::NarrowPassage);
        // Free lateral play left to a robot of the reference width.
        let lateral_clearance = NARROW_PASSAGE_WIDTH - robot_width;
        assert!(lateral_clearance < 2.0 * robot_width);
        // An agent in its lane overlaps a robot on the centerline.
        let agent = &sc.world.agents[0];
        assert!(agent.position(0.0).1.abs() < agent.radius + OracleConfig::default().robot_radius);
        assert!(sc.world.agents.len() == 2 && sc.world.agents[1].phase < sc.world.agents[0].phase);
    }

    #[test]
    fn noiseless_teleop_in_empty_world_is_straight() {
        let sc = Scenario {
            id: ScenarioId::OpenSpace,
            world: World::empty(open_bounds()),
            start: Pose2::identity(),
            goal: (6.0, 0.0),
        };
        let cfg = TeleopConfig::default().noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = teleop_surrogate(&sc, sc.start, &cfg, "e", &mut rng);
        assert!(ep.reached_goal && !ep.truncated);
        assert!(ep.poses.iter().all(|p| p.y.abs() < 1e-6));
        for d in &ep.demonstrations {
            assert!(d.executed.waypoints().iter().all(|p| p.y.abs() < 1e-6));
            assert_eq!(d.executed.len(), 8);
        }
    }

    #[test]
    fn teleop_is_deterministic() {
        let sc = build_scenario(ScenarioId::GlassCorridor);
        let cfg = TeleopConfig::default();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            teleop_surrogate(&sc, sc.start, &cfg, "e", &mut rng)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn noiseless_open_space_never_collides() {
        let sc = build_scenario(ScenarioId::OpenSpace);
        let cfg = TeleopConfig::default().noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = teleop_surrogate(&sc, sc.start, &cfg, "e", &mut rng);
        for (k, p) in ep.poses.iter().enumerate() {
            assert!(
                !check_collision(&sc.world, p, 0.2, k as f64 * cfg.dt),
                "collision at tick {k}"
            );
        }
        assert!(ep.reached_goal);
    }

    #[test]
    fn noise_lowers_clearance_in_corridor() {
        let sc = build_scenario(ScenarioId::GlassCorridor);
        let mcfg = MetricConfig::default();
        let mean_clearance = |cfg: &TeleopConfig, seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ep = teleop_surrogate(&sc, sc.start, cfg, "e", &mut rng);
            let vals: Vec<f64> = ep
                .demonstrations
                .iter()
                .map(|d| min_clearance(&d.executed, &scan_to_points(&d.frame.scan), &mcfg))
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let noisy = TeleopConfig {
            sigma_omega: 0.2,
            lag_ticks: 3,
            ..TeleopConfig::default()
        };
        let clean = TeleopConfig::default().noiseless();
        let base = mean_clearance(&clean, 0);
        let noisy_mean = (0..5).map(|s| mean_clearance(&noisy, s)).sum::<f64>() / 5.0;
        assert!(noisy_mean < base, "noisy {noisy_mean} vs clean {base}");
    }

    fn oracle_set(world: &World, dataset: Trajectory<f64>, input: AnnotatorInput<f64>) -> CandidateSet<f64> {
        let _ = world;
        generate_for_observation("o", &dataset, input, &GenConfig::default()).unwrap()
    }

    #[test]
    fn oracle_hard_fails_colliding_candidates() {
        let pts: Vec<Point> = (1..=8).map(|k| (0.25 * k as f64, 0.0)).collect();
        let straight = Trajectory::from_positions(&pts, FrameTag::EgoStart).unwrap();
        let mut w = World::empty(open_bounds());
        // Wall across the straight path only.
        w.static_segments.push(Segment {
            a: (1.0, -0.1),
            b: (1.0, 0.1),
        });
        let cs = oracle_set(&w, straight.clone(), AnnotatorInput::None);
        let cfg = OracleConfig::default();
        let pose = Pose2::identity();
        let s0 = oracle_score(CandidateKind::Dataset, &straight, &w, &pose, (5.0, 0.0), 0.0, &cfg);
        assert_eq!(s0, OracleScore::Collides);
        assert!(!oracle_prefer(&cs, 0, 1, &w, &pose, (5.0, 0.0), 0.0, &cfg));
        assert!(oracle_prefer(&cs, 1, 0, &w, &pose, (5.0, 0.0), 0.0, &cfg));
    }

    #[test]
    fn identical_candidates_favor_lower_index() {
        let pts: Vec<Point> = (1..=8).map(|k| (0.25 * k as f64, 0.1 * k as f64)).collect();
        let t = Trajectory::from_positions(&pts, FrameTag::EgoStart).unwrap();
        let cand = |kind| crate::counterfactual::Candidate { kind, trajectory: t.clone() };
        let cs = CandidateSet::new(
            "o",
            8,
            vec![cand(CandidateKind::Dataset), cand(CandidateKind::RotatedCcw), cand(CandidateKind::RotatedCw)],
        )
        .unwrap();
        let w = World::empty(open_bounds());
        let cfg = OracleConfig::default();
        let pose = Pose2::identity();
        assert!(oracle_prefer(&cs, 1, 2, &w, &pose, (5.0, 0.0), 0.0, &cfg));
        assert!(oracle_prefer(&cs, 0, 2, &w, &pose, (5.0, 0.0), 0.0, &cfg));
        assert!(!oracle_prefer(&cs, 2, 1, &w, &pose, (5.0, 0.0), 0.0, &cfg));
    }

    #[test]
    fn boxed_in_robot_gets_stop() {
        let mut w = World::empty(open_bounds());
        for (a, b) in [((0.4, -0.4), (0.4, 0.4)), ((-0.4, -0.4), (-0.4, 0.4)), ((-0.4, 0.4), (0.4, 0.4)), ((-0.4, -0.4), (0.4, -0.4))] {
            w.static_segments.push(Segment { a, b });
        }
        let pts: Vec<Point> = (1..=8).map(|k| (0.25 * k as f64, 0.0)).collect();
        let traj = Trajectory::from_positions(&pts, FrameTag::EgoStart).unwrap();
        let input = oracle_target(&traj, &w, &Pose2::identity(), (5.0, 0.0), 0.0, &OracleConfig::default(), &TargetProviderConfig::default());
        assert_eq!(input, AnnotatorInput::Stop);
        let cs = generate_for_observation("o", &traj, input, &GenConfig::default()).unwrap();
        let recs = auto_annotate(&cs, &w, &Pose2::identity(), (5.0, 0.0), 0.0, &OracleConfig::default(), "oracle");
        assert_eq!(recs.len(), 6);
        for r in recs.iter().filter(|r| r.j == 3) {
            assert!(!r.preferred_i, "stop must win pair ({}, {})", r.i, r.j);
        }
    }

    #[test]
    fn target_provider_steers_around_obstacle() {
        let mut w = World::empty(open_bounds());
        w.static_circles.push(Circle { center: (2.0, 0.0), radius: 0.4 });
        let pts: Vec<Point> = (1..=8).map(|k| (0.3 * k as f64, 0.0)).collect();
        let traj = Trajectory::from_positions(&pts, FrameTag::EgoStart).unwrap();
        let input = oracle_target(&traj, &w, &Pose2::identity(), (6.0, 0.0), 0.0, &OracleConfig::default(), &TargetProviderConfig::default());
        let AnnotatorInput::Target((x, y)) = input else { panic!("expected a target, got {input:?}") };
        assert!(x > 0.0 && y.abs() > 0.3);
    }
}
