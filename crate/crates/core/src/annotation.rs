//! Annotation task service.
//!
//! Each observation first gets a target task: a target provider clicks where
//! the robot should head (or asks it to stop), which completes the candidate
//! set. Every candidate pair then becomes a preference task for labelers who
//! did not provide that observation's target. Tasks are leased to one
//! annotator at a time and requeued when the lease runs out.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counterfactual::{
    candidate_pairs, derive_seed, generate_for_observation, AnnotatorInput, CandidateSet, CounterfactualError,
    GenConfig,
};
use crate::geometry::{from_frame, to_frame, Pose2};
use crate::io::{self, IoError};
use crate::preference::{summarize, DatasetSummary, PreferenceError, PreferenceRecord, PreferenceStore, Source};
use crate::sim::{build_scenario, Demonstration, Scenario, ScenarioId};

pub const DEFAULT_LEASE_SECS: f64 = 600.0;
/// Number of entries in the UI's neutral trajectory palette.
pub const PALETTE_SIZE: usize = 6;

pub const CANDIDATES_FILE: &str = "candidates.jsonl";
pub const PREFERENCES_FILE: &str = "preferences.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("wrong-role: this operation needs the {0} role")]
    WrongRole(Role),
    #[error("not-found: {0}")]
    NotFound(String),
    #[error("invalid-argument: {0}")]
    InvalidArgument(String),
    #[error("out-of-bounds: ({x}, {y}) lies outside the scene")]
    OutOfBounds { x: f64, y: f64 },
    #[error("stale-task: {0}")]
    StaleTask(String),
    #[error("duplicate-record: {0}")]
    DuplicateRecord(String),
    #[error(transparent)]
    Counterfactual(#[from] CounterfactualError),
    #[error(transparent)]
    Preference(#[from] PreferenceError),
    #[error(transparent)]
    Io(#[from] IoError),
}

impl AnnotationError {
    pub fn code(&self) -> &'static str {
        match self {
            AnnotationError::WrongRole(_) => "wrong-role",
            AnnotationError::NotFound(_) => "not-found",
            AnnotationError::InvalidArgument(_) => "invalid-argument",
            AnnotationError::OutOfBounds { .. } => "out-of-bounds",
            AnnotationError::StaleTask(_) => "stale-task",
            AnnotationError::DuplicateRecord(_) => "duplicate-record",
            AnnotationError::Counterfactual(e) => e.code(),
            AnnotationError::Preference(e) => e.code(),
            AnnotationError::Io(e) => e.code(),
        }
    }
}

/// Seconds on some monotone clock.
pub trait Clock: Send + Sync {
    fn now(&self) -> f64;
}

/// Wall clock, seconds since the Unix epoch.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0)
    }
}

/// Hand-driven clock for tests.
#[derive(Debug, Default)]
pub struct ManualClock(Mutex<f64>);

impl ManualClock {
    pub fn new(t: f64) -> Self {
        Self(Mutex::new(t))
    }

    pub fn advance(&self, dt: f64) {
        *self.0.lock().expect("clock lock") += dt;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> f64 {
        *self.0.lock().expect("clock lock")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    TargetProvider,
    PreferenceLabeler,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::TargetProvider => "target_provider",
            Role::PreferenceLabeler => "preference_labeler",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "target_provider" | "target" => Some(Role::TargetProvider),
            "preference_labeler" | "preference" => Some(Role::PreferenceLabeler),
            _ => None,
        }
    }

    fn phase(&self) -> Phase {
        match self {
            Role::TargetProvider => Phase::Target,
            Role::PreferenceLabeler => Phase::Preference,
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatorSession {
    pub annotator_id: String,
    pub role: Role,
}

impl AnnotatorSession {
    pub fn new(annotator_id: impl Into<String>, role: Role) -> Self {
        Self {
            annotator_id: annotator_id.into(),
            role,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Target,
    Preference,
}

/// Top-down scene in world coordinates (meters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub bounds_min: [f64; 2],
    pub bounds_max: [f64; 2],
    /// `[x1, y1, x2, y2]`
    pub segments: Vec<[f64; 4]>,
    /// `[x, y, radius]`
    pub circles: Vec<[f64; 3]>,
    /// People at the observation time, `[x, y, radius]`.
    pub agents: Vec<[f64; 3]>,
    /// `[x, y, heading]`
    pub robot: [f64; 3],
    pub goal: [f64; 2],
    /// Recorded trajectory, shown faintly in the target phase.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dataset: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShownCandidate {
    /// Index into the observation's candidate set.
    pub index: usize,
    /// Palette slot; carries no meaning.
    pub color: usize,
    pub waypoints: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPair {
    pub i: usize,
    pub j: usize,
    /// Left/right presentation order.
    pub shown: [ShownCandidate; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub observation_id: String,
    pub phase: Phase,
    pub scene: Scene,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pair: Option<TaskPair>,
    pub lease_expires: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotationConfig {
    pub gen: GenConfig,
    /// Seeds presentation order and tie-breaking in the export summary.
    pub seed: u64,
    pub lease_secs: f64,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            gen: GenConfig::default(),
            seed: 0,
            lease_secs: DEFAULT_LEASE_SECS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Lease {
    Open,
    Held { annotator: String, expires: f64 },
    Done,
}

#[derive(Debug, Clone)]
struct TaskEntry {
    id: String,
    obs: String,
    phase: Phase,
    pair: Option<(usize, usize)>,
    lease: Lease,
}

struct ObsEntry {
    demo: Demonstration,
    target_by: Option<String>,
    labelers: BTreeSet<String>,
}

struct Inner {
    observations: BTreeMap<String, ObsEntry>,
    tasks: Vec<TaskEntry>,
    by_id: HashMap<String, usize>,
}

impl Inner {
    fn push_task(&mut self, task: TaskEntry) {
        self.by_id.insert(task.id.clone(), self.tasks.len());
        self.tasks.push(task);
    }
}

/// Outcome of an accepted target submission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetAccepted {
    pub observation_id: String,
    pub candidates: usize,
    pub preference_tasks: usize,
}

pub struct AnnotationService {
    inner: Mutex<Inner>,
    store: PreferenceStore,
    scenarios: BTreeMap<ScenarioId, Scenario>,
    clock: Arc<dyn Clock>,
    cfg: AnnotationConfig,
}

pub fn target_task_id(obs: &str) -> String {
    format!("target/{obs}")
}

pub fn preference_task_id(obs: &str, i: usize, j: usize) -> String {
    format!("pref/{obs}/{i}-{j}")
}

fn xy(p: &Pose2<f64>) -> [f64; 2] {
    [p.x, p.y]
}

impl AnnotationService {
    /// One target task per demonstration, in observation-id order.
    pub fn new(
        demos: Vec<Demonstration>,
        cfg: AnnotationConfig,
        store: PreferenceStore,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, AnnotationError> {
        cfg.gen.validate()?;
        if !(cfg.lease_secs > 0.0) {
            return Err(AnnotationError::InvalidArgument("lease_secs must be positive".into()));
        }
        let mut inner = Inner {
            observations: BTreeMap::new(),
            tasks: Vec::new(),
            by_id: HashMap::new(),
        };
        let mut scenarios = BTreeMap::new();
        for demo in demos {
            let id = demo.frame.observation_id.clone();
            scenarios.entry(demo.scenario).or_insert_with(|| build_scenario(demo.scenario));
            let entry = ObsEntry {
                demo,
                target_by: None,
                labelers: BTreeSet::new(),
            };
            if inner.observations.insert(id.clone(), entry).is_some() {
                return Err(AnnotationError::InvalidArgument(format!("observation {id} listed twice")));
            }
        }
        let ids: Vec<String> = inner.observations.keys().cloned().collect();
        for obs in ids {
            inner.push_task(TaskEntry {
                id: target_task_id(&obs),
                obs,
                phase: Phase::Target,
                pair: None,
                lease: Lease::Open,
            });
        }
        Ok(Self {
            inner: Mutex::new(inner),
            store,
            scenarios,
            clock,
            cfg,
        })
    }

    pub fn config(&self) -> &AnnotationConfig {
        &self.cfg
    }

    pub fn store(&self) -> &PreferenceStore {
        &self.store
    }

    /// The annotator's current lease for its role, or the next free task.
    pub fn next_task(&self, session: &AnnotatorSession) -> Option<AnnotationTask> {
        let now = self.clock.now();
        let phase = session.role.phase();
        let mut inner = self.inner.lock().expect("service lock");

        let held = inner.tasks.iter().position(|t| {
            t.phase == phase
                && matches!(&t.lease, Lease::Held { annotator, expires }
                    if *annotator == session.annotator_id && *expires > now)
        });
        let k = match held {
            Some(k) => k,
            None => {
                let eligible = |t: &TaskEntry, inner: &Inner| {
                    let free = match &t.lease {
                        Lease::Open => true,
                        Lease::Held { expires, .. } => *expires <= now,
                        Lease::Done => false,
                    };
                    let obs = &inner.observations[&t.obs];
                    let disjoint = match phase {
                        Phase::Preference => obs.target_by.as_deref() != Some(session.annotator_id.as_str()),
                        Phase::Target => !obs.labelers.contains(&session.annotator_id),
                    };
                    t.phase == phase && free && disjoint
                };
                let k = inner.tasks.iter().position(|t| eligible(t, &inner))?;
                inner.tasks[k].lease = Lease::Held {
                    annotator: session.annotator_id.clone(),
                    expires: now + self.cfg.lease_secs,
                };
                k
            }
        };
        let task = inner.tasks[k].clone();
        let Lease::Held { expires, .. } = task.lease else {
            unreachable!("task was just leased")
        };
        let obs = &inner.observations[&task.obs];
        Some(self.render(&task, obs, expires))
    }

    fn render(&self, task: &TaskEntry, obs: &ObsEntry, lease_expires: f64) -> AnnotationTask {
        let demo = &obs.demo;
        let pose = demo.pose;
        let sc = &self.scenarios[&demo.scenario];
        let world = &sc.world;
        let t = demo.frame.stamp;
        let to_world = |w: &[Pose2<f64>]| -> Vec<[f64; 2]> { w.iter().map(|p| xy(&from_frame(p, &pose))).collect() };
        let mut scene = Scene {
            bounds_min: [world.bounds.min.0, world.bounds.min.1],
            bounds_max: [world.bounds.max.0, world.bounds.max.1],
            segments: world.static_segments.iter().map(|s| [s.a.0, s.a.1, s.b.0, s.b.1]).collect(),
            circles: world.static_circles.iter().map(|c| [c.center.0, c.center.1, c.radius]).collect(),
            agents: world
                .agents
                .iter()
                .map(|a| {
                    let p = a.position(t);
                    [p.0, p.1, a.radius]
                })
                .collect(),
            robot: [pose.x, pose.y, pose.theta],
            goal: [sc.goal.0, sc.goal.1],
            dataset: None,
        };
        let pair = match (task.phase, task.pair) {
            (Phase::Target, _) | (Phase::Preference, None) => {
                scene.dataset = Some(to_world(demo.executed.waypoints()));
                None
            }
            (Phase::Preference, Some((i, j))) => {
                let cs = self
                    .store
                    .candidate_set(&task.obs)
                    .expect("preference tasks exist only for completed sets");
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &task.id));
                let (a, b) = if rng.random_bool(0.5) { (j, i) } else { (i, j) };
                let c0 = rng.random_range(0..PALETTE_SIZE);
                let c1 = (c0 + rng.random_range(1..PALETTE_SIZE)) % PALETTE_SIZE;
                let shown = |index: usize, color: usize| ShownCandidate {
                    index,
                    color,
                    waypoints: to_world(cs.candidates()[index].trajectory.waypoints()),
                };
                Some(TaskPair {
                    i,
                    j,
                    shown: [shown(a, c0), shown(b, c1)],
                })
            }
        };
        AnnotationTask {
            task_id: task.id.clone(),
            observation_id: task.obs.clone(),
            phase: task.phase,
            scene,
            pair,
            lease_expires,
        }
    }

    /// Checks that `annotator` holds a live lease on task `k`.
    fn check_lease(inner: &Inner, k: usize, annotator: &str, now: f64) -> Result<(), AnnotationError> {
        let task = &inner.tasks[k];
        match &task.lease {
            Lease::Done => Err(AnnotationError::DuplicateRecord(format!("task {} is already answered", task.id))),
            Lease::Held { annotator: a, expires } if a == annotator && *expires > now => Ok(()),
            Lease::Held { annotator: a, .. } if a == annotator => {
                Err(AnnotationError::StaleTask(format!("lease on {} expired", task.id)))
            }
            _ => Err(AnnotationError::StaleTask(format!("task {} is not leased to {annotator}", task.id))),
        }
    }

    /// Stores a target click (scene frame) or a stop request and completes
    /// the observation's candidate set.
    pub fn submit_target(
        &self,
        session: &AnnotatorSession,
        observation_id: &str,
        click: Option<(f64, f64)>,
        stop: bool,
    ) -> Result<TargetAccepted, AnnotationError> {
        if session.role != Role::TargetProvider {
            return Err(AnnotationError::WrongRole(Role::TargetProvider));
        }
        let input_kind = match (click, stop) {
            (Some(_), true) => {
                return Err(AnnotationError::InvalidArgument(
                    "a target click and a stop request are mutually exclusive".into(),
                ))
            }
            (None, false) => {
                return Err(AnnotationError::InvalidArgument("give either a target click or stop".into()))
            }
            _ => click,
        };
        let now = self.clock.now();
        let mut inner = self.inner.lock().expect("service lock");
        let k = *inner
            .by_id
            .get(&target_task_id(observation_id))
            .ok_or_else(|| AnnotationError::NotFound(format!("observation {observation_id}")))?;
        Self::check_lease(&inner, k, &session.annotator_id, now)?;

        let obs = &inner.observations[observation_id];
        let input = match input_kind {
            None => AnnotatorInput::Stop,
            Some((x, y)) => {
                if !(x.is_finite() && y.is_finite()) {
                    return Err(AnnotationError::InvalidArgument("click coordinates must be finite".into()));
                }
                let bounds = &self.scenarios[&obs.demo.scenario].world.bounds;
                if !bounds.contains((x, y)) {
                    return Err(AnnotationError::OutOfBounds { x, y });
                }
                let ego = to_frame(&Pose2::new(x, y, 0.0), &obs.demo.pose);
                AnnotatorInput::Target((ego.x, ego.y))
            }
        };
        let cs = generate_for_observation(observation_id, &obs.demo.executed, input, &self.cfg.gen)?;
        let m = cs.len();
        self.store.put_candidate_set(cs);

        inner.tasks[k].lease = Lease::Done;
        let entry = inner.observations.get_mut(observation_id).expect("checked above");
        entry.target_by = Some(session.annotator_id.clone());
        let pairs = candidate_pairs(m);
        for &(i, j) in &pairs {
            inner.push_task(TaskEntry {
                id: preference_task_id(observation_id, i, j),
                obs: observation_id.to_owned(),
                phase: Phase::Preference,
                pair: Some((i, j)),
                lease: Lease::Open,
            });
        }
        Ok(TargetAccepted {
            observation_id: observation_id.to_owned(),
            candidates: m,
            preference_tasks: pairs.len(),
        })
    }

    /// Records the labeler's choice (a candidate index of the task's pair).
    pub fn submit_preference(
        &self,
        session: &AnnotatorSession,
        task_id: &str,
        choice: usize,
    ) -> Result<PreferenceRecord, AnnotationError> {
        if session.role != Role::PreferenceLabeler {
            return Err(AnnotationError::WrongRole(Role::PreferenceLabeler));
        }
        let now = self.clock.now();
        let mut inner = self.inner.lock().expect("service lock");
        let k = *inner
            .by_id
            .get(task_id)
            .ok_or_else(|| AnnotationError::NotFound(format!("task {task_id}")))?;
        let Some((i, j)) = inner.tasks[k].pair else {
            return Err(AnnotationError::InvalidArgument(format!("{task_id} is not a preference task")));
        };
        Self::check_lease(&inner, k, &session.annotator_id, now)?;
        if choice != i && choice != j {
            return Err(AnnotationError::InvalidArgument(format!(
                "choice {choice} is not in the pair ({i}, {j})"
            )));
        }
        let obs = inner.tasks[k].obs.clone();
        let rec = PreferenceRecord {
            observation_id: obs.clone(),
            i,
            j,
            preferred_i: choice == i,
            annotator_id: session.annotator_id.clone(),
            source: Source::Human,
        };
        self.store.record(rec.clone())?;
        inner.tasks[k].lease = Lease::Done;
        inner
            .observations
            .get_mut(&obs)
            .expect("task refers to a known observation")
            .labelers
            .insert(session.annotator_id.clone());
        Ok(rec)
    }

    /// Records whose annotator also gave the target of the same observation.
    pub fn disjointness_violations(&self) -> Vec<PreferenceRecord> {
        let inner = self.inner.lock().expect("service lock");
        self.store
            .snapshot()
            .records
            .into_iter()
            .filter(|r| {
                inner
                    .observations
                    .get(&r.observation_id)
                    .and_then(|o| o.target_by.as_deref())
                    == Some(r.annotator_id.as_str())
            })
            .collect()
    }

    /// Counts of (open, leased, done) tasks.
    pub fn progress(&self) -> (usize, usize, usize) {
        let now = self.clock.now();
        let inner = self.inner.lock().expect("service lock");
        inner.tasks.iter().fold((0, 0, 0), |(o, l, d), t| match &t.lease {
            Lease::Done => (o, l, d + 1),
            Lease::Held { expires, .. } if *expires > now => (o, l + 1, d),
            _ => (o + 1, l, d),
        })
    }

    /// Writes candidate sets, records and the summary into `dir`.
    pub fn export_dataset(&self, dir: &Path) -> Result<DatasetSummary, AnnotationError> {
        export_dataset(&self.store, dir, self.cfg.seed)
    }
}

/// Writes the completed candidate sets, the records (sorted) and a summary.
/// Unchanged contents produce byte-identical files.
pub fn export_dataset(store: &PreferenceStore, dir: &Path, seed: u64) -> Result<DatasetSummary, AnnotationError> {
    let mut dataset = store.snapshot();
    dataset.records.sort_by(|a, b| {
        (&a.observation_id, a.pair(), &a.annotator_id, a.i).cmp(&(&b.observation_id, b.pair(), &b.annotator_id, b.i))
    });
    let summary = summarize(&dataset, seed)?;
    std::fs::create_dir_all(dir).map_err(|source| IoError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let sets: Vec<CandidateSet<f64>> = dataset.candidate_sets.values().cloned().collect();
    io::write_candidate_sets(&dir.join(CANDIDATES_FILE), &sets)?;
    io::write_records(&dir.join(PREFERENCES_FILE), &dataset.records)?;
    io::write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}
