//! Line-oriented JSON formats for observations, candidate sets and
//! preference records.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counterfactual::{Candidate, CandidateKind, CandidateSet};
use crate::geometry::{FrameTag, Pose2, Trajectory};
use crate::metrics::LaserScan;
use crate::preference::{PreferenceRecord, Source};
use crate::sim::{Demonstration, ScenarioId, SensorFrame};

/// A malformed line, optionally located in a file.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("format-error: {}{message}", location(.path, .line))]
pub struct FormatError {
    pub path: Option<PathBuf>,
    pub line: Option<usize>,
    pub message: String,
}

fn location(path: &Option<PathBuf>, line: &Option<usize>) -> String {
    match (path, line) {
        (Some(p), Some(l)) => format!("{}:{l}: ", p.display()),
        (Some(p), None) => format!("{}: ", p.display()),
        (None, Some(l)) => format!("line {l}: "),
        (None, None) => String::new(),
    }
}

impl FormatError {
    pub fn new(message: impl Into<String>) -> Self {
        Self {
            path: None,
            line: None,
            message: message.into(),
        }
    }

    pub fn at(mut self, path: &Path, line: usize) -> Self {
        self.path = Some(path.to_path_buf());
        self.line = Some(line);
        self
    }
}

impl From<serde_json::Error> for FormatError {
    fn from(e: serde_json::Error) -> Self {
        FormatError::new(e.to_string())
    }
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io-error: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
}

impl IoError {
    pub fn code(&self) -> &'static str {
        match self {
            IoError::Io { .. } => "io-error",
            IoError::Format(_) => "format-error",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serialized preference record. Field order is part of the format.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    obs: String,
    i: usize,
    j: usize,
    y: u8,
    annotator: String,
    source: String,
}

pub fn record_to_line(rec: &PreferenceRecord) -> String {
    let line = RecordLine {
        obs: rec.observation_id.clone(),
        i: rec.i,
        j: rec.j,
        y: u8::from(rec.preferred_i),
        annotator: rec.annotator_id.clone(),
        source: rec.source.as_str().to_owned(),
    };
    serde_json::to_string(&line).expect("record serializes")
}

pub fn record_from_line(line: &str) -> Result<PreferenceRecord, FormatError> {
    let r: RecordLine = serde_json::from_str(line)?;
    let preferred_i = match r.y {
        0 => false,
        1 => true,
        y => return Err(FormatError::new(format!("label y must be 0 or 1, got {y}"))),
    };
    let source = Source::parse(&r.source)
        .ok_or_else(|| FormatError::new(format!("unknown source {:?}", r.source)))?;
    Ok(PreferenceRecord {
        observation_id: r.obs,
        i: r.i,
        j: r.j,
        preferred_i,
        annotator_id: r.annotator,
        source,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CandidateLine {
    kind: String,
    wps: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CandidateSetLine {
    obs: String,
    n: usize,
    candidates: Vec<CandidateLine>,
}

fn poses_to_arrays(traj: &Trajectory<f64>) -> Vec<[f64; 3]> {
    traj.waypoints().iter().map(|p| [p.x, p.y, p.theta]).collect()
}

fn arrays_to_traj(wps: &[[f64; 3]]) -> Result<Trajectory<f64>, FormatError> {
    let poses = wps.iter().map(|w| Pose2::new(w[0], w[1], w[2])).collect();
    Trajectory::new(poses, FrameTag::EgoStart).map_err(|e| FormatError::new(e.to_string()))
}

pub fn candidate_set_to_line(cs: &CandidateSet<f64>) -> String {
    let line = CandidateSetLine {
        obs: cs.observation_id().to_owned(),
        n: cs.horizon(),
        candidates: cs
            .candidates()
            .iter()
            .map(|c| CandidateLine {
                kind: c.kind.as_str().to_owned(),
                wps: poses_to_arrays(&c.trajectory),
            })
            .collect(),
    };
    serde_json::to_string(&line).expect("candidate set serializes")
}

pub fn candidate_set_from_line(line: &str) -> Result<CandidateSet<f64>, FormatError> {
    let l: CandidateSetLine = serde_json::from_str(line)?;
    let candidates = l
        .candidates
        .iter()
        .map(|c| {
            let kind = CandidateKind::parse(&c.kind)
                .ok_or_else(|| FormatError::new(format!("unknown candidate kind {:?}", c.kind)))?;
            Ok(Candidate {
                kind,
                trajectory: arrays_to_traj(&c.wps)?,
            })
        })
        .collect::<Result<Vec<_>, FormatError>>()?;
    CandidateSet::new(l.obs, l.n, candidates).map_err(|e| FormatError::new(e.to_string()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScanLine {
    amin: f64,
    ainc: f64,
    ranges: Vec<f64>,
    rmax: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ObservationLine {
    obs: String,
    scan: ScanLine,
    goal: [f64; 2],
    exec: Vec<[f64; 3]>,
    scenario: String,
    t: f64,
    pose: [f64; 3],
}

pub fn demonstration_to_line(d: &Demonstration) -> String {
    let s = &d.frame.scan;
    let line = ObservationLine {
        obs: d.frame.observation_id.clone(),
        scan: ScanLine {
            amin: s.angle_min,
            ainc: s.angle_increment,
            ranges: s.ranges.clone(),
            rmax: s.max_range,
        },
        goal: [d.frame.goal.0, d.frame.goal.1],
        exec: poses_to_arrays(&d.executed),
        scenario: d.scenario.as_str().to_owned(),
        t: d.frame.stamp,
        pose: [d.pose.x, d.pose.y, d.pose.theta],
    };
    serde_json::to_string(&line).expect("observation serializes")
}

pub fn demonstration_from_line(line: &str) -> Result<Demonstration, FormatError> {
    let l: ObservationLine = serde_json::from_str(line)?;
    let scenario = ScenarioId::parse(&l.scenario)
        .ok_or_else(|| FormatError::new(format!("unknown scenario {:?}", l.scenario)))?;
    let scan = LaserScan {
        angle_min: l.scan.amin,
        angle_increment: l.scan.ainc,
        ranges: l.scan.ranges,
        max_range: l.scan.rmax,
    };
    scan.validate().map_err(|e| FormatError::new(e.to_string()))?;
    Ok(Demonstration {
        frame: SensorFrame {
            observation_id: l.obs,
            scan,
            goal: (l.goal[0], l.goal[1]),
            stamp: l.t,
        },
        executed: arrays_to_traj(&l.exec)?,
        pose: Pose2::new(l.pose[0], l.pose[1], l.pose[2]),
        scenario,
    })
}

/// Reads non-blank lines of `path` through `parse`, tagging errors with the
/// 1-based line number.
pub fn read_lines<T>(
    path: &Path,
    mut parse: impl FnMut(&str) -> Result<T, FormatError>,
) -> Result<Vec<T>, IoError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(&line).map_err(|e| e.at(path, k + 1))?);
    }
    Ok(out)
}

pub fn write_lines<I>(path: &Path, lines: I) -> Result<(), IoError>
where
    I: IntoIterator,
    I::Item: AsRef<str>,
{
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        writeln!(w, "{}", line.as_ref()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_records(path: &Path) -> Result<Vec<PreferenceRecord>, FormatError> {
    read_lines(path, record_from_line).map_err(|e| match e {
        IoError::Format(f) => f,
        IoError::Io { path, source } => FormatError {
            path: Some(path),
            line: None,
            message: source.to_string(),
        },
    })
}

pub fn read_demonstrations(path: &Path) -> Result<Vec<Demonstration>, IoError> {
    read_lines(path, demonstration_from_line)
}

pub fn write_demonstrations(path: &Path, demos: &[Demonstration]) -> Result<(), IoError> {
    write_lines(path, demos.iter().map(demonstration_to_line))
}

pub fn read_candidate_sets(path: &Path) -> Result<Vec<CandidateSet<f64>>, IoError> {
    read_lines(path, candidate_set_from_line)
}

pub fn write_candidate_sets(path: &Path, sets: &[CandidateSet<f64>]) -> Result<(), IoError> {
    write_lines(path, sets.iter().map(candidate_set_to_line))
}

pub fn write_records(path: &Path, records: &[PreferenceRecord]) -> Result<(), IoError> {
    write_lines(path, records.iter().map(record_to_line))
}

/// Pretty JSON document helpers for configs, checkpoints and reports.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| {
        let mut f = FormatError::from(e);
        f.path = Some(path.to_path_buf());
        f.into()
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(value).map_err(FormatError::from)?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}
