//! Subcommand bodies. All commands read and write inside one run directory,
//! so each stage finds the outputs of earlier stages by name.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use cfpref_core::annotation::{
    self, AnnotationConfig, AnnotationError, AnnotationService, SystemClock, CANDIDATES_FILE, PREFERENCES_FILE,
    SUMMARY_FILE,
};
use cfpref_core::executor::EpisodeLog;
use cfpref_core::io::{self, FormatError, IoError};
use cfpref_core::metrics::{summarize_episodes, EpisodeReport, Histogram, OfflineReport, HISTOGRAM_BINS};
use cfpref_core::policy::{loss_curve_csv, Checkpoint, LossKind, PolicyError, TrainConfig};
use cfpref_core::preference::{aggregate_all, summarize, DatasetSummary, PreferenceDataset, PreferenceError, PreferenceStore};
use cfpref_core::sim::{Demonstration, ScenarioId};

use crate::pipeline::{self, PipelineError, RunConfig};

pub const CONFIG_FILE: &str = "config.json";
pub const OBSERVATIONS_FILE: &str = "observations.jsonl";
/// Candidate sets before any annotator input.
pub const RAW_CANDIDATES_FILE: &str = "candidates.jsonl";
pub const ANNOTATIONS_DIR: &str = "annotations";
pub const AGGREGATE_FILE: &str = "aggregate.jsonl";
pub const AGGREGATE_SUMMARY_FILE: &str = "aggregate_summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const EVAL_DIR: &str = "eval";
pub const EPISODE_DIR: &str = "episodes";
pub const HISTOGRAM_DIR: &str = "histograms";
pub const REPORT_FILE: &str = "report.md";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Preference(#[from] PreferenceError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("io-error: {}: missing; run `{hint}` first", .path.display())]
    MissingInput { path: PathBuf, hint: &'static str },
    #[error("invalid-argument: {0}")]
    InvalidArgument(String),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Pipeline(e) => e.code(),
            CliError::Io(e) => e.code(),
            CliError::Annotation(e) => e.code(),
            CliError::Preference(e) => e.code(),
            CliError::Policy(e) => e.code(),
            CliError::MissingInput { .. } => "io-error",
            CliError::InvalidArgument(_) => "invalid-argument",
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Io(e.into())
    }
}

fn mkdir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|source| {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|source| {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn require(path: PathBuf, hint: &'static str) -> Result<PathBuf, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingInput { path, hint })
    }
}

/// Command-line overrides applied on top of the loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub observations: Option<usize>,
    pub episodes: Option<usize>,
}

/// `--config` if given, else the run directory's config, else defaults.
pub fn load_config(out: &Path, o: &Overrides) -> Result<RunConfig, CliError> {
    let stored = out.join(CONFIG_FILE);
    let mut cfg: RunConfig = match &o.config {
        Some(p) => io::read_json(p)?,
        None if stored.exists() => io::read_json(&stored)?,
        None => RunConfig::default(),
    };
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(n) = o.observations {
        cfg.observations = n;
    }
    if let Some(n) = o.episodes {
        cfg.episodes = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_observations(out: &Path) -> Result<Vec<Demonstration>, CliError> {
    let path = require(out.join(OBSERVATIONS_FILE), "gen-data")?;
    Ok(io::read_demonstrations(&path)?)
}

/// Annotated candidate sets and records written by auto-annotate or the
/// annotation server.
pub fn read_annotations(out: &Path) -> Result<PreferenceDataset, CliError> {
    let dir = out.join(ANNOTATIONS_DIR);
    let sets = io::read_candidate_sets(&require(dir.join(CANDIDATES_FILE), "auto-annotate")?)?;
    let records = io::read_records(&require(dir.join(PREFERENCES_FILE), "auto-annotate")?)?;
    let ds = pipeline::preference_dataset(&sets, records);
    ds.validate()?;
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataSummary {
    pub observations: usize,
    pub candidates_per_observation: usize,
    pub waypoints: usize,
}

pub fn gen_data(out: &Path, cfg: &RunConfig) -> Result<GenDataSummary, CliError> {
    mkdir(out)?;
    io::write_json(&out.join(CONFIG_FILE), cfg)?;
    let data = pipeline::generate_data(cfg)?;
    io::write_demonstrations(&out.join(OBSERVATIONS_FILE), &data.demonstrations)?;
    io::write_candidate_sets(&out.join(RAW_CANDIDATES_FILE), &data.candidate_sets)?;
    Ok(GenDataSummary {
        observations: data.demonstrations.len(),
        candidates_per_observation: cfg.gen.m,
        waypoints: cfg.gen.n,
    })
}

pub fn auto_annotate(out: &Path, cfg: &RunConfig) -> Result<DatasetSummary, CliError> {
    let demos = read_observations(out)?;
    let (sets, records) = pipeline::auto_annotate_all(&demos, cfg)?;
    let store = PreferenceStore::in_memory();
    for cs in sets {
        store.put_candidate_set(cs);
    }
    for rec in records {
        store.record(rec)?;
    }
    let dir = out.join(ANNOTATIONS_DIR);
    let summary = annotation::export_dataset(&store, &dir, cfg.seed)?;
    io::write_json(&dir.join(CONFIG_FILE), cfg)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestLine {
    pub obs: String,
    pub best: usize,
    pub kind: String,
}

pub fn aggregate(out: &Path, cfg: &RunConfig) -> Result<DatasetSummary, CliError> {
    let ds = read_annotations(out)?;
    let winners = aggregate_all(&ds, cfg.seed)?;
    let lines = winners.iter().map(|(obs, best, kind)| {
        serde_json::to_string(&BestLine {
            obs: obs.clone(),
            best: *best,
            kind: kind.as_str().to_owned(),
        })
        .expect("plain struct serializes")
    });
    io::write_lines(&out.join(AGGREGATE_FILE), lines)?;
    let summary = summarize(&ds, cfg.seed)?;
    io::write_json(&out.join(AGGREGATE_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

pub fn checkpoint_path(out: &Path, loss: LossKind) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("{loss}.json"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub train_observations: usize,
    pub final_loss: f64,
}

pub fn train(out: &Path, cfg: &RunConfig, loss: LossKind) -> Result<TrainSummary, CliError> {
    let demos = read_observations(out)?;
    let prefs = read_annotations(out)?;
    let (train_demos, _) = pipeline::split(&demos, cfg.seed, cfg.test_fraction);
    let result = pipeline::train_policy(&train_demos, &prefs, loss, cfg)?;
    let dir = out.join(CHECKPOINT_DIR);
    mkdir(&dir)?;
    let tc = TrainConfig {
        loss_kind: loss,
        ..cfg.train
    };
    let path = checkpoint_path(out, loss);
    io::write_json(&path, &Checkpoint::from_params(&result.params, cfg.features, tc))?;
    write_text(&dir.join(format!("{loss}.loss.csv")), &loss_curve_csv(&result.loss_curve))?;
    io::write_json(&dir.join(format!("{loss}.config.json")), cfg)?;
    Ok(TrainSummary {
        checkpoint: path,
        train_observations: train_demos.len(),
        final_loss: result.loss_curve.last().copied().unwrap_or(f64::NAN),
    })
}

/// Explicit `--checkpoint`, else the run's checkpoint for `--loss`. The label
/// is the checkpoint's file stem.
pub fn resolve_checkpoint(
    out: &Path,
    checkpoint: Option<&Path>,
    loss: Option<LossKind>,
) -> Result<(PathBuf, String), CliError> {
    let path = match (checkpoint, loss) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(l)) => checkpoint_path(out, l),
        (None, None) => return Err(CliError::InvalidArgument("give --checkpoint or --loss".into())),
    };
    let path = require(path, "train")?;
    let label = path
        .file_stem()
        .and_then(|s| s.to_str())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| CliError::InvalidArgument(format!("cannot name policy from {}", path.display())))?
        .to_owned();
    Ok((path, label))
}

fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<(cfpref_core::policy::PolicyParams<f64>, RunConfig), CliError> {
    let ck: Checkpoint = io::read_json(path)?;
    let params = ck.to_params::<f64>()?;
    let mut cfg = cfg.clone();
    cfg.features = ck.features;
    cfg.validate()?;
    Ok((params, cfg))
}

pub fn eval_offline(out: &Path, cfg: &RunConfig, checkpoint: &Path, label: &str) -> Result<OfflineReport, CliError> {
    let (params, cfg) = load_checkpoint(checkpoint, cfg)?;
    let demos = read_observations(out)?;
    let prefs = read_annotations(out)?;
    let (_, test) = pipeline::split(&demos, cfg.seed, cfg.test_fraction);
    let report = pipeline::evaluate_offline(&params, &test, &prefs, &cfg)?;
    let dir = out.join(EVAL_DIR);
    mkdir(&dir)?;
    io::write_json(&dir.join(format!("{label}.json")), &report)?;
    io::write_json(&dir.join(format!("{label}.config.json")), &cfg)?;
    Ok(report)
}

pub fn simulate(
    out: &Path,
    cfg: &RunConfig,
    checkpoint: &Path,
    label: &str,
    scenarios: &[ScenarioId],
) -> Result<EpisodeReport, CliError> {
    let (params, cfg) = load_checkpoint(checkpoint, cfg)?;
    let policy = pipeline::network_policy(params, &cfg);
    let ids = if scenarios.is_empty() {
        cfg.scenario_ids()?
    } else {
        scenarios.to_vec()
    };
    let dir = out.join(EPISODE_DIR).join(label);
    mkdir(&dir)?;
    let mut outcomes = Vec::new();
    for id in ids {
        remove_episode_files(&dir, id)?;
        let logs = pipeline::simulate(&policy, label, &[id], &cfg);
        for (k, log) in logs.iter().enumerate() {
            io::write_json(&dir.join(format!("{id}-{k:02}.json")), log)?;
            outcomes.push(log.outcome());
        }
    }
    io::write_json(&dir.join(CONFIG_FILE), &cfg)?;
    Ok(summarize_episodes(&outcomes))
}

fn remove_episode_files(dir: &Path, id: ScenarioId) -> Result<(), CliError> {
    let prefix = format!("{id}-");
    for path in list_json(dir)? {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.starts_with(&prefix) {
            std::fs::remove_file(&path).map_err(|source| IoError::Io { path: path.clone(), source })?;
        }
    }
    Ok(())
}

/// Sorted `*.json` files directly inside `dir`; empty when `dir` is absent.
fn list_json(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let entries = std::fs::read_dir(dir).map_err(|source| IoError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();
    for e in entries {
        let path = e
            .map_err(|source| IoError::Io {
                path: dir.to_path_buf(),
                source,
            })?
            .path();
        if path.is_file() && path.extension().is_some_and(|x| x == "json") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|source| IoError::Io {
            path: dir.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_owned()
}

fn pct(new: f64, base: f64) -> String {
    if base == 0.0 {
        "n/a".into()
    } else {
        format!("{:+.1}%", 100.0 * (new - base) / base)
    }
}

/// Episode logs of one policy, grouped by scenario.
pub fn read_episodes(dir: &Path) -> Result<BTreeMap<String, Vec<EpisodeLog>>, CliError> {
    let mut by_scenario: BTreeMap<String, Vec<EpisodeLog>> = BTreeMap::new();
    for path in list_json(dir)? {
        if path.file_name().is_some_and(|n| n == CONFIG_FILE) {
            continue;
        }
        let log: EpisodeLog = io::read_json(&path)?;
        by_scenario.entry(log.header.scenario.clone()).or_default().push(log);
    }
    Ok(by_scenario)
}

fn histogram_csv(h: &Histogram) -> String {
    let edges = h.bin_edges();
    let mut s = String::from("lo,hi,count\n");
    for (k, c) in h.counts.iter().enumerate() {
        let _ = writeln!(s, "{},{},{c}", edges[k], edges[k + 1]);
    }
    s
}

/// Markdown tables for every evaluated and simulated policy, plus 50-bin
/// histograms of the per-sample offline metrics.
pub fn report(out: &Path) -> Result<String, CliError> {
    let offline: Vec<(String, OfflineReport)> = list_json(&out.join(EVAL_DIR))?
        .into_iter()
        .filter(|p| !stem(p).ends_with(".config"))
        .map(|p| Ok((stem(&p), io::read_json(&p)?)))
        .collect::<Result<_, CliError>>()?;
    let episodes: Vec<(String, BTreeMap<String, Vec<EpisodeLog>>)> = subdirs(&out.join(EPISODE_DIR))?
        .into_iter()
        .map(|d| Ok((stem(&d), read_episodes(&d)?)))
        .collect::<Result<_, CliError>>()?;
    if offline.is_empty() && episodes.is_empty() {
        return Err(CliError::MissingInput {
            path: out.join(EVAL_DIR),
            hint: "eval-offline",
        });
    }

    let mut md = String::from("# Run report\n\n");
    if !offline.is_empty() {
        md.push_str("## Offline metrics on the held-out split\n\n");
        md.push_str("| policy | samples | near-collisions | mean min clearance (m) | mean deviation (m) |\n");
        md.push_str("|---|---:|---:|---:|---:|\n");
        for (label, r) in &offline {
            let _ = writeln!(
                md,
                "| {label} | {} | {} | {:.4} | {:.4} |",
                r.samples, r.near_collision_count, r.mean_min_clearance, r.mean_deviation
            );
        }
        let find = |l: &str| offline.iter().find(|(k, _)| k == l).map(|(_, r)| r);
        if let (Some(bc), Some(chop)) = (find("bc"), find("chop")) {
            let _ = writeln!(
                md,
                "| chop vs bc | | {} | {} | {} |",
                pct(chop.near_collision_count as f64, bc.near_collision_count as f64),
                pct(chop.mean_min_clearance, bc.mean_min_clearance),
                pct(chop.mean_deviation, bc.mean_deviation)
            );
        }
        md.push('\n');

        let hist_dir = out.join(HISTOGRAM_DIR);
        mkdir(&hist_dir)?;
        md.push_str(&format!("## Distributions ({HISTOGRAM_BINS} bins)\n\n"));
        md.push_str("| policy | metric | range | file |\n|---|---|---|---|\n");
        for (label, r) in &offline {
            let series: [(&str, Vec<f64>); 2] = [
                ("deviation", r.rows.iter().map(|row| row.deviation).collect()),
                ("clearance", r.rows.iter().map(|row| row.clearance).collect()),
            ];
            for (metric, values) in series {
                let h = Histogram::build(&values, HISTOGRAM_BINS);
                let name = format!("{label}-{metric}.csv");
                write_text(&hist_dir.join(&name), &histogram_csv(&h))?;
                let _ = writeln!(md, "| {label} | {metric} | {:.3} to {:.3} | {HISTOGRAM_DIR}/{name} |", h.lo, h.hi);
            }
        }
        md.push('\n');
    }
    if !episodes.is_empty() {
        md.push_str("## Closed-loop episodes\n\n");
        md.push_str("| scenario | policy | episodes | success rate | mean collisions | mean min clearance (m) | mean path completion |\n");
        md.push_str("|---|---|---:|---:|---:|---:|---:|\n");
        let mut scenarios: Vec<&String> = episodes.iter().flat_map(|(_, m)| m.keys()).collect();
        scenarios.sort();
        scenarios.dedup();
        let row = |md: &mut String, sc: &str, label: &str, logs: &[&EpisodeLog]| {
            let r = summarize_episodes(&logs.iter().map(|l| l.outcome()).collect::<Vec<_>>());
            let _ = writeln!(
                md,
                "| {sc} | {label} | {} | {:.2} | {:.2} | {:.3} | {:.3} |",
                r.episodes, r.success_rate, r.mean_collisions, r.mean_min_clearance, r.mean_path_completion
            );
        };
        for sc in scenarios {
            for (label, by) in &episodes {
                if let Some(logs) = by.get(sc) {
                    row(&mut md, sc, label, &logs.iter().collect::<Vec<_>>());
                }
            }
        }
        for (label, by) in &episodes {
            let all: Vec<&EpisodeLog> = by.values().flatten().collect();
            row(&mut md, "all", label, &all);
        }
        md.push('\n');
    }
    write_text(&out.join(REPORT_FILE), &md)?;
    Ok(md)
}

/// Serves annotation tasks over HTTP until interrupted, then exports.
pub async fn annotate_serve(out: &Path, cfg: &RunConfig, addr: &str, lease_secs: Option<f64>) -> Result<(), CliError> {
    let demos = read_observations(out)?;
    let acfg = AnnotationConfig {
        gen: cfg.gen,
        seed: cfg.seed,
        lease_secs: lease_secs.unwrap_or(annotation::DEFAULT_LEASE_SECS),
    };
    let service = Arc::new(AnnotationService::new(
        demos,
        acfg,
        PreferenceStore::in_memory(),
        Arc::new(SystemClock),
    )?);
    let export_dir = out.join(ANNOTATIONS_DIR);
    let app = crate::server::router(service.clone(), export_dir.clone());
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| {
        CliError::InvalidArgument(format!("cannot listen on {addr}: {source}"))
    })?;
    eprintln!("serving annotation tasks on http://{addr}");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|source| IoError::Io {
            path: PathBuf::from(addr),
            source,
        })?;
    let summary = service.export_dataset(&export_dir)?;
    io::write_json(&export_dir.join(CONFIG_FILE), cfg)?;
    eprintln!(
        "exported {} records over {} observations to {}",
        summary.total_records,
        summary.observations,
        export_dir.join(SUMMARY_FILE).display()
    );
    Ok(())
}
