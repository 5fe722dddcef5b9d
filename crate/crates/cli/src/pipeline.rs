//! End-to-end pipeline stages shared by the subcommands and the test suites.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use cfpref_core::counterfactual::{derive_seed, generate_for_observation, AnnotatorInput, CandidateSet, GenConfig};
use cfpref_core::executor::{run_episode, EpisodeConfig, EpisodeLog, NetworkPolicy, PathPolicy};
use cfpref_core::metrics::{evaluate_batch, scan_to_points, MetricConfig, OfflineReport, OfflineSample};
use cfpref_core::policy::{
    distill_targets, encode_features, predict, train, FeatureConfig, LossKind, PolicyParams, TrainConfig,
    TrainOutput,
};
use cfpref_core::preference::{aggregate_seeded, PreferenceDataset, PreferenceRecord};
use cfpref_core::sim::{
    auto_annotate, build_scenario, jittered_start, oracle_target, teleop_surrogate, Demonstration, OracleConfig,
    Scenario, ScenarioId, TargetProviderConfig, TeleopConfig,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid-config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Counterfactual(#[from] cfpref_core::counterfactual::CounterfactualError),
    #[error(transparent)]
    Preference(#[from] cfpref_core::preference::PreferenceError),
    #[error(transparent)]
    Policy(#[from] cfpref_core::policy::PolicyError),
    #[error(transparent)]
    Metrics(#[from] cfpref_core::metrics::MetricsError),
}

impl PipelineError {
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::InvalidConfig(_) => "invalid-config",
            PipelineError::Counterfactual(e) => e.code(),
            PipelineError::Preference(e) => e.code(),
            PipelineError::Policy(e) => e.code(),
            PipelineError::Metrics(e) => e.code(),
        }
    }
}

/// Everything a run needs; serialized into every output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub scenarios: Vec<String>,
    pub seed: u64,
    pub observations: usize,
    pub episodes: usize,
    /// Lateral (m) and heading (rad) jitter of episode start poses.
    pub start_jitter: [f64; 2],
    pub teleop: TeleopConfig,
    pub gen: GenConfig,
    pub oracle: OracleConfig,
    pub target_provider: TargetProviderConfig,
    pub features: FeatureConfig,
    pub train: TrainConfig,
    pub metrics: MetricConfig,
    pub episode: EpisodeConfig,
    pub test_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenarios: ScenarioId::ALL.iter().map(|s| s.as_str().to_owned()).collect(),
            seed: 0,
            observations: 3000,
            episodes: 5,
            start_jitter: [0.3, 0.25],
            teleop: TeleopConfig::default(),
            gen: GenConfig::default(),
            oracle: OracleConfig::default(),
            target_provider: TargetProviderConfig::default(),
            features: FeatureConfig::default(),
            train: TrainConfig::default(),
            metrics: MetricConfig::default(),
            episode: EpisodeConfig::default(),
            test_fraction: 0.2,
        }
    }
}

impl RunConfig {
    pub fn scenario_ids(&self) -> Result<Vec<ScenarioId>, PipelineError> {
        if self.scenarios.is_empty() {
            return Err(PipelineError::InvalidConfig("no scenarios configured".into()));
        }
        self.scenarios
            .iter()
            .map(|s| ScenarioId::parse(s).ok_or_else(|| PipelineError::InvalidConfig(format!("unknown scenario {s:?}"))))
            .collect()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.scenario_ids()?;
        self.gen.validate()?;
        self.train.validate()?;
        if self.gen.n != self.teleop.horizon {
            return Err(PipelineError::InvalidConfig(format!(
                "candidate horizon {} differs from teleop horizon {}",
                self.gen.n, self.teleop.horizon
            )));
        }
        if self.features.n_beams != self.teleop.lidar.n_beams || self.features.n_beams != self.episode.lidar.n_beams {
            return Err(PipelineError::InvalidConfig("feature, teleop and episode beam counts differ".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(PipelineError::InvalidConfig("test_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Teleoperated demonstrations plus their unannotated candidate sets.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub demonstrations: Vec<Demonstration>,
    pub candidate_sets: Vec<CandidateSet<f64>>,
}

const MAX_TELEOP_EPISODES: usize = 100_000;

/// Drives teleop episodes round-robin over the configured scenarios until
/// `cfg.observations` observations exist.
pub fn generate_data(cfg: &RunConfig) -> Result<GeneratedData, PipelineError> {
    cfg.validate()?;
    let scenarios: Vec<Scenario> = cfg.scenario_ids()?.into_iter().map(build_scenario).collect();
    let mut demos = Vec::with_capacity(cfg.observations);
    let mut episode = 0usize;
    while demos.len() < cfg.observations {
        if episode >= MAX_TELEOP_EPISODES {
            return Err(PipelineError::InvalidConfig("teleop produced no observations".into()));
        }
        let sc = &scenarios[episode % scenarios.len()];
        let seed = derive_seed(cfg.seed, &format!("teleop/{episode}"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = jittered_start(sc, seed, cfg.start_jitter[0], cfg.start_jitter[1]);
        let prefix = format!("{}-{episode:04}", sc.id);
        let ep = teleop_surrogate(sc, start, &cfg.teleop, &prefix, &mut rng);
        demos.extend(ep.demonstrations);
        episode += 1;
    }
    demos.truncate(cfg.observations);
    let candidate_sets = demos
        .iter()
        .map(|d| generate_for_observation(&d.frame.observation_id, &d.executed, AnnotatorInput::None, &cfg.gen))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GeneratedData {
        demonstrations: demos,
        candidate_sets,
    })
}

pub const ORACLE_ANNOTATOR: &str = "oracle";

/// Scripted annotation: the target provider completes each candidate set,
/// then the oracle labels every pair.
pub fn auto_annotate_all(
    demos: &[Demonstration],
    cfg: &RunConfig,
) -> Result<(Vec<CandidateSet<f64>>, Vec<PreferenceRecord>), PipelineError> {
    let mut worlds: BTreeMap<ScenarioId, Scenario> = BTreeMap::new();
    let mut sets = Vec::with_capacity(demos.len());
    let mut records = Vec::with_capacity(demos.len() * 6);
    for d in demos {
        let sc = worlds.entry(d.scenario).or_insert_with(|| build_scenario(d.scenario));
        let t = d.frame.stamp;
        let input = oracle_target(&d.executed, &sc.world, &d.pose, sc.goal, t, &cfg.oracle, &cfg.target_provider);
        let cs = generate_for_observation(&d.frame.observation_id, &d.executed, input, &cfg.gen)?;
        records.extend(auto_annotate(&cs, &sc.world, &d.pose, sc.goal, t, &cfg.oracle, ORACLE_ANNOTATOR));
        sets.push(cs);
    }
    Ok((sets, records))
}

pub fn preference_dataset(sets: &[CandidateSet<f64>], records: Vec<PreferenceRecord>) -> PreferenceDataset {
    PreferenceDataset {
        records,
        candidate_sets: sets.iter().map(|cs| (cs.observation_id().to_owned(), cs.clone())).collect(),
    }
}

/// Seeded observation-level split: `(train, test)`.
pub fn split(demos: &[Demonstration], seed: u64, test_fraction: f64) -> (Vec<Demonstration>, Vec<Demonstration>) {
    let threshold = (test_fraction * 10_000.0).round() as u64;
    demos
        .iter()
        .cloned()
        .partition(|d| derive_seed(seed, &format!("split/{}", d.frame.observation_id)) % 10_000 >= threshold)
}

/// Distills targets for `loss` and trains a policy on them.
pub fn train_policy(
    train_demos: &[Demonstration],
    prefs: &PreferenceDataset,
    loss: LossKind,
    cfg: &RunConfig,
) -> Result<TrainOutput<f64>, PipelineError> {
    let pairs = distill_targets(train_demos, prefs, loss, &cfg.features, cfg.seed)?;
    let tc = TrainConfig {
        loss_kind: loss,
        ..cfg.train
    };
    Ok(train(&pairs, &tc)?)
}

/// Offline metrics of `params` against the aggregated preferred trajectory of
/// each held-out observation.
pub fn evaluate_offline(
    params: &PolicyParams<f64>,
    test_demos: &[Demonstration],
    prefs: &PreferenceDataset,
    cfg: &RunConfig,
) -> Result<OfflineReport, PipelineError> {
    let by_obs = prefs.by_observation();
    let mut samples = Vec::with_capacity(test_demos.len());
    for d in test_demos {
        let id = d.frame.observation_id.as_str();
        let cs = prefs
            .candidate_sets
            .get(id)
            .ok_or_else(|| cfpref_core::preference::PreferenceError::MissingObservation(id.to_owned()))?;
        let recs = by_obs
            .get(id)
            .ok_or_else(|| cfpref_core::preference::PreferenceError::NoAnnotations(id.to_owned()))?;
        let best = aggregate_seeded(cs, recs.iter().copied(), cfg.seed)?;
        let features = encode_features(&d.frame.scan, d.frame.goal, &cfg.features)?;
        samples.push(OfflineSample {
            prediction: predict(params, &features)?,
            preferred: cs.candidates()[best].trajectory.clone(),
            cloud: scan_to_points(&d.frame.scan),
        });
    }
    Ok(evaluate_batch(&samples, &cfg.metrics)?)
}

/// Closed-loop runs: `cfg.episodes` jittered starts per scenario.
pub fn simulate<P: PathPolicy + ?Sized>(
    policy: &P,
    label: &str,
    scenarios: &[ScenarioId],
    cfg: &RunConfig,
) -> Vec<EpisodeLog> {
    let mut logs = Vec::new();
    for &id in scenarios {
        let sc = build_scenario(id);
        for k in 0..cfg.episodes {
            let seed = derive_seed(cfg.seed, &format!("sim/{id}/{k}"));
            let start = jittered_start(&sc, seed, cfg.start_jitter[0], cfg.start_jitter[1]);
            logs.push(run_episode(&sc, start, policy, label, seed, &cfg.episode));
        }
    }
    logs
}

pub fn network_policy(params: PolicyParams<f64>, cfg: &RunConfig) -> NetworkPolicy {
    NetworkPolicy {
        params,
        features: cfg.features,
    }
}
