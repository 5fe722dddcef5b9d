//! Asynchronous plan-execute stack on a simulated clock.
//!
//! Three logical nodes exchange immutable messages over ordered channels:
//! the model runner publishes [`PathMsg`]s, the [`PathManager`] keeps the
//! active path and publishes the next target, and the planner turns targets
//! into [`VelocityCmd`]s. [`run_episode`] interleaves them on one thread.

use std::sync::mpsc;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{from_frame, normalize_angle, to_frame, Pose2, Trajectory};
use crate::metrics::{path_completion, EpisodeOutcome};
use crate::policy::{encode_features, predict, FeatureConfig, PolicyParams};
use crate::sim::{
    cast_scan, colliding_agent, static_collision, LidarConfig, RobotLimits, RobotState, Scenario, SensorFrame,
    World,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecutorError {
    #[error("rejected-stale: path seq {got} is not newer than {current}")]
    RejectedStale { got: u64, current: u64 },
    #[error("invalid-argument: {0}")]
    InvalidArgument(String),
}

impl ExecutorError {
    pub fn code(&self) -> &'static str {
        match self {
            ExecutorError::RejectedStale { .. } => "rejected-stale",
            ExecutorError::InvalidArgument(_) => "invalid-argument",
        }
    }
}

/// Path published by the model runner, in the ego frame of `start_pose`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathMsg {
    pub waypoints: Trajectory<f64>,
    pub start_pose: Pose2<f64>,
    pub stamp: f64,
    pub seq: u64,
}

/// Remaining waypoints of the current path, already in odom.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActivePath {
    pub remaining: Vec<Pose2<f64>>,
    pub source_seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VelocityCmd {
    pub v: f64,
    pub omega: f64,
}

/// Sole owner of mutable path state. Replacement and pruning each hold the
/// lock for their whole duration, so an update sees either the old or the
/// new path.
#[derive(Debug, Default)]
pub struct PathManager {
    active: Mutex<ActivePath>,
}

impl PathManager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn source_seq(&self) -> u64 {
        self.active.lock().expect("path lock").source_seq
    }

    pub fn active(&self) -> ActivePath {
        self.active.lock().expect("path lock").clone()
    }

    pub fn accept_new_path(&self, msg: &PathMsg) -> Result<(), ExecutorError> {
        let remaining: Vec<Pose2<f64>> = msg
            .waypoints
            .waypoints()
            .iter()
            .map(|w| from_frame(w, &msg.start_pose))
            .collect();
        let mut active = self.active.lock().expect("path lock");
        if msg.seq <= active.source_seq {
            return Err(ExecutorError::RejectedStale {
                got: msg.seq,
                current: active.source_seq,
            });
        }
        *active = ActivePath {
            remaining,
            source_seq: msg.seq,
        };
        Ok(())
    }

    /// Drops leading waypoints that are within `prune_radius` of `odom` or
    /// behind it, then returns the first survivor.
    pub fn update(&self, odom: &Pose2<f64>, prune_radius: f64) -> Option<Pose2<f64>> {
        let mut active = self.active.lock().expect("path lock");
        let keep_from = active
            .remaining
            .iter()
            .position(|w| !should_prune(w, odom, prune_radius))
            .unwrap_or(active.remaining.len());
        active.remaining.drain(..keep_from);
        active.remaining.first().copied()
    }
}

fn should_prune(w: &Pose2<f64>, odom: &Pose2<f64>, prune_radius: f64) -> bool {
    let local = to_frame(w, odom);
    local.x.hypot(local.y) < prune_radius || local.x < 0.0
}

pub fn accept_new_path(mgr: &PathManager, msg: &PathMsg) -> Result<(), ExecutorError> {
    mgr.accept_new_path(msg)
}

pub fn path_manager_update(mgr: &PathManager, odom: &Pose2<f64>, prune_radius: f64) -> Result<Option<Pose2<f64>>, ExecutorError> {
    if !(prune_radius > 0.0) {
        return Err(ExecutorError::InvalidArgument("prune_radius must be positive".into()));
    }
    Ok(mgr.update(odom, prune_radius))
}

/// Anything that maps an observation to an ego-frame path. `None` means the
/// runner publishes nothing this tick.
pub trait PathPolicy {
    fn plan(&self, frame: &SensorFrame) -> Option<Trajectory<f64>>;
}

impl<F> PathPolicy for F
where
    F: Fn(&SensorFrame) -> Option<Trajectory<f64>>,
{
    fn plan(&self, frame: &SensorFrame) -> Option<Trajectory<f64>> {
        self(frame)
    }
}

/// Trained network plus the encoding it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkPolicy {
    pub params: PolicyParams<f64>,
    pub features: FeatureConfig,
}

impl PathPolicy for NetworkPolicy {
    fn plan(&self, frame: &SensorFrame) -> Option<Trajectory<f64>> {
        let f = encode_features(&frame.scan, frame.goal, &self.features).ok()?;
        predict(&self.params, &f).ok()
    }
}

/// Runs inference and stamps the result; `seq` advances only on success.
pub fn model_runner_tick<P: PathPolicy + ?Sized>(
    policy: &P,
    frame: &SensorFrame,
    odom: &Pose2<f64>,
    seq: &mut u64,
) -> Option<PathMsg> {
    let waypoints = policy.plan(frame)?;
    *seq += 1;
    Some(PathMsg {
        waypoints,
        start_pose: *odom,
        stamp: frame.stamp,
        seq: *seq,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerGains {
    pub k_v: f64,
    pub k_omega: f64,
}

impl Default for PlannerGains {
    fn default() -> Self {
        Self { k_v: 2.0, k_omega: 2.0 }
    }
}

/// Proportional waypoint tracker that slows when misaligned and never reverses.
pub fn planner_tick(
    target: &Pose2<f64>,
    odom: &Pose2<f64>,
    gains: &PlannerGains,
    limits: &RobotLimits,
    goal_tol: f64,
) -> VelocityCmd {
    let (dx, dy) = (target.x - odom.x, target.y - odom.y);
    let dist = dx.hypot(dy);
    if dist < goal_tol {
        return VelocityCmd::default();
    }
    let e = normalize_angle(dy.atan2(dx) - odom.theta);
    let omega = (gains.k_omega * e).clamp(-limits.omega_max, limits.omega_max);
    let v = (gains.k_v * dist).clamp(0.0, limits.v_max) * e.cos().max(0.0);
    VelocityCmd { v, omega }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub dt: f64,
    pub runner_period: f64,
    /// Delay between capturing an observation and publishing its path.
    pub runner_latency: f64,
    pub prune_radius: f64,
    pub goal_tolerance: f64,
    pub planner_goal_tol: f64,
    pub max_steps: usize,
    pub robot_radius: f64,
    pub gains: PlannerGains,
    pub limits: RobotLimits,
    pub lidar: LidarConfig,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            runner_period: 0.5,
            runner_latency: 0.0,
            prune_radius: 0.25,
            goal_tolerance: 0.2,
            planner_goal_tol: 0.05,
            max_steps: 1200,
            robot_radius: 0.2,
            gains: PlannerGains::default(),
            limits: RobotLimits::default(),
            lidar: LidarConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub scenario: String,
    pub policy: String,
    pub seed: u64,
    pub start: [f64; 3],
    pub goal: [f64; 2],
    pub config: EpisodeConfig,
}

/// One control tick. `pose` is the odometry the manager and planner saw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRow {
    pub t: f64,
    pub pose: [f64; 3],
    pub cmd: VelocityCmd,
    pub target: Option<[f64; 3]>,
    pub collision: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub reached_goal: bool,
    pub collisions: usize,
    pub static_collision: bool,
    pub min_clearance: f64,
    pub path_completion: f64,
    pub executed_length: f64,
    pub steps: usize,
    pub paths_published: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub header: EpisodeHeader,
    pub rows: Vec<TickRow>,
    pub summary: EpisodeSummary,
}

impl EpisodeLog {
    pub fn outcome(&self) -> EpisodeOutcome {
        EpisodeOutcome {
            reached_goal: self.summary.reached_goal,
            collisions: self.summary.collisions,
            min_clearance: self.summary.min_clearance,
            path_completion: self.summary.path_completion,
        }
    }

    /// Ticks whose published target sits within `prune_radius` of, or behind,
    /// the pose it was published for.
    pub fn target_violations(&self) -> Vec<usize> {
        let r = self.header.config.prune_radius;
        self.rows
            .iter()
            .enumerate()
            .filter_map(|(k, row)| {
                let tgt = row.target?;
                let pose = Pose2::new(row.pose[0], row.pose[1], row.pose[2]);
                should_prune(&Pose2::new(tgt[0], tgt[1], tgt[2]), &pose, r).then_some(k)
            })
            .collect()
    }
}

fn arr3(p: &Pose2<f64>) -> [f64; 3] {
    [p.x, p.y, p.theta]
}

struct InFlight {
    frame: SensorFrame,
    odom: Pose2<f64>,
    ready_at: f64,
}

fn observe(world: &World, pose: &Pose2<f64>, goal: (f64, f64), t: f64, lidar: &LidarConfig) -> SensorFrame {
    let g = to_frame(&Pose2::new(goal.0, goal.1, 0.0), pose);
    SensorFrame {
        observation_id: format!("t{t:.3}"),
        scan: cast_scan(world, pose, lidar, t),
        goal: (g.x, g.y),
        stamp: t,
    }
}

/// Closed-loop episode. Agent collisions are counted and the agent removed;
/// a static collision ends the run.
pub fn run_episode<P: PathPolicy + ?Sized>(
    scenario: &Scenario,
    start: Pose2<f64>,
    policy: &P,
    policy_label: &str,
    seed: u64,
    cfg: &EpisodeConfig,
) -> EpisodeLog {
    let mut world = scenario.world.clone();
    let goal = scenario.goal;
    let tiny = 1e-9;

    let (path_tx, path_rx) = mpsc::channel::<PathMsg>();
    let (target_tx, target_rx) = mpsc::channel::<Option<Pose2<f64>>>();
    let (cmd_tx, cmd_rx) = mpsc::channel::<VelocityCmd>();
    let manager = PathManager::new();

    let mut state = RobotState::at(start);
    let mut seq = 0u64;
    let mut next_fire = 0.0;
    let mut in_flight: Option<InFlight> = None;
    let mut rows = Vec::new();
    let mut collisions = 0usize;
    let mut static_hit = false;
    let mut reached_goal = false;
    let mut min_clearance = world.clearance((start.x, start.y), 0.0);
    let mut executed_length = 0.0;
    let d0 = (start.x - goal.0).hypot(start.y - goal.1);

    for step in 0..cfg.max_steps {
        let t = step as f64 * cfg.dt;
        let odom = state.pose;

        // Model runner: publish finished inference, then start the next one
        // if the runner is idle and its period has elapsed.
        if in_flight.as_ref().is_some_and(|f| t + tiny >= f.ready_at) {
            let job = in_flight.take().expect("checked above");
            if let Some(msg) = model_runner_tick(policy, &job.frame, &job.odom, &mut seq) {
                path_tx.send(msg).expect("manager receiver alive");
            }
        }
        if in_flight.is_none() && t + tiny >= next_fire {
            in_flight = Some(InFlight {
                frame: observe(&world, &odom, goal, t, &cfg.lidar),
                odom,
                ready_at: t + cfg.runner_latency,
            });
            next_fire = t + cfg.runner_period;
            if cfg.runner_latency <= 0.0 {
                let job = in_flight.take().expect("just set");
                if let Some(msg) = model_runner_tick(policy, &job.frame, &job.odom, &mut seq) {
                    path_tx.send(msg).expect("manager receiver alive");
                }
            }
        }

        // Path manager.
        while let Ok(msg) = path_rx.try_recv() {
            let _ = manager.accept_new_path(&msg);
        }
        target_tx
            .send(manager.update(&odom, cfg.prune_radius))
            .expect("planner receiver alive");

        // Planner.
        let target = target_rx.recv().expect("target sent this tick");
        let cmd = match &target {
            Some(tgt) => planner_tick(tgt, &odom, &cfg.gains, &cfg.limits, cfg.planner_goal_tol),
            None => VelocityCmd::default(),
        };
        cmd_tx.send(cmd).expect("robot receiver alive");

        // Robot and world.
        let cmd = cmd_rx.recv().expect("command sent this tick");
        state = crate::sim::step_robot(&state, (cmd.v, cmd.omega), cfg.dt, &cfg.limits);
        let t_next = (step + 1) as f64 * cfg.dt;
        executed_length += (state.pose.x - odom.x).hypot(state.pose.y - odom.y);
        min_clearance = min_clearance.min(world.clearance((state.pose.x, state.pose.y), t_next));

        let mut collided = false;
        while let Some(k) = colliding_agent(&world, &state.pose, cfg.robot_radius, t_next) {
            collisions += 1;
            collided = true;
            world.agents.remove(k);
        }
        if static_collision(&world, &state.pose, cfg.robot_radius) {
            collided = true;
            static_hit = true;
        }
        rows.push(TickRow {
            t,
            pose: arr3(&odom),
            cmd,
            target: target.as_ref().map(arr3),
            collision: collided,
        });
        if static_hit {
            break;
        }
        if (state.pose.x - goal.0).hypot(state.pose.y - goal.1) < cfg.goal_tolerance {
            reached_goal = true;
            break;
        }
    }

    let d_final = (state.pose.x - goal.0).hypot(state.pose.y - goal.1);
    let completion = path_completion(d0 - d_final, d0, reached_goal, static_hit);
    EpisodeLog {
        header: EpisodeHeader {
            scenario: scenario.id.as_str().to_owned(),
            policy: policy_label.to_owned(),
            seed,
            start: arr3(&start),
            goal: [goal.0, goal.1],
            config: *cfg,
        },
        summary: EpisodeSummary {
            reached_goal,
            collisions,
            static_collision: static_hit,
            min_clearance,
            path_completion: completion,
            executed_length,
            steps: rows.len(),
            paths_published: seq,
        },
        rows,
    }
}
