//! Pairwise preference records, win-count aggregation and Bradley–Terry
//! reward fitting.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counterfactual::{candidate_pairs, derive_seed, CandidateKind, CandidateSet};
use crate::io;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum PreferenceError {
    #[error("missing-observation: {0}")]
    MissingObservation(String),
    #[error("invalid-record: {0}")]
    InvalidRecord(String),
    #[error("duplicate-record: observation {obs}, pair ({i}, {j}), annotator {annotator}")]
    DuplicateRecord {
        obs: String,
        i: usize,
        j: usize,
        annotator: String,
    },
    #[error("no-annotations: observation {0} has no preference records")]
    NoAnnotations(String),
    #[error("under-identified: items {0:?} appear in no comparison")]
    UnderIdentified(Vec<usize>),
    #[error("io-error: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Format(#[from] io::FormatError),
}

impl PreferenceError {
    pub fn code(&self) -> &'static str {
        match self {
            PreferenceError::MissingObservation(_) => "missing-observation",
            PreferenceError::InvalidRecord(_) => "invalid-record",
            PreferenceError::DuplicateRecord { .. } => "duplicate-record",
            PreferenceError::NoAnnotations(_) => "no-annotations",
            PreferenceError::UnderIdentified(_) => "under-identified",
            PreferenceError::Io { .. } => "io-error",
            PreferenceError::Format(_) => "format-error",
        }
    }
}

/// Who produced a preference label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Human,
    Oracle,
}

impl Source {
    pub fn as_str(&self) -> &'static str {
        match self {
            Source::Human => "human",
            Source::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "human" => Some(Source::Human),
            "oracle" => Some(Source::Oracle),
            _ => None,
        }
    }
}

/// One pairwise label: `preferred_i` is true when candidate `i` was chosen.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PreferenceRecord {
    pub observation_id: String,
    pub i: usize,
    pub j: usize,
    pub preferred_i: bool,
    pub annotator_id: String,
    pub source: Source,
}

impl PreferenceRecord {
    #[inline]
    pub fn winner(&self) -> usize {
        if self.preferred_i {
            self.i
        } else {
            self.j
        }
    }

    #[inline]
    pub fn loser(&self) -> usize {
        if self.preferred_i {
            self.j
        } else {
            self.i
        }
    }

    /// Canonical unordered pair.
    #[inline]
    pub fn pair(&self) -> (usize, usize) {
        (self.i.min(self.j), self.i.max(self.j))
    }

    pub fn validate_against(&self, m: usize) -> Result<(), PreferenceError> {
        if self.i == self.j {
            return Err(PreferenceError::InvalidRecord(format!(
                "{}: i == j == {}",
                self.observation_id, self.i
            )));
        }
        if self.i >= m || self.j >= m {
            return Err(PreferenceError::InvalidRecord(format!(
                "{}: pair ({}, {}) out of range for {m} candidates",
                self.observation_id, self.i, self.j
            )));
        }
        Ok(())
    }

    fn key(&self) -> (String, usize, usize, String) {
        let (a, b) = self.pair();
        (self.observation_id.clone(), a, b, self.annotator_id.clone())
    }
}

/// Immutable snapshot of the store contents.
#[derive(Debug, Clone, Default)]
pub struct PreferenceDataset {
    pub records: Vec<PreferenceRecord>,
    pub candidate_sets: BTreeMap<String, CandidateSet<f64>>,
}

impl PreferenceDataset {
    pub fn records_for<'a>(&'a self, obs: &'a str) -> impl Iterator<Item = &'a PreferenceRecord> + 'a {
        self.records.iter().filter(move |r| r.observation_id == obs)
    }

    /// Records grouped by observation, in observation-id order.
    pub fn by_observation(&self) -> BTreeMap<&str, Vec<&PreferenceRecord>> {
        let mut out: BTreeMap<&str, Vec<&PreferenceRecord>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.observation_id.as_str()).or_default().push(r);
        }
        out
    }

    /// Distinct unordered pairs covered by at least one record.
    pub fn covered_pairs(&self, obs: &str) -> BTreeSet<(usize, usize)> {
        self.records_for(obs).map(PreferenceRecord::pair).collect()
    }

    pub fn is_fully_annotated(&self, obs: &str) -> bool {
        match self.candidate_sets.get(obs) {
            Some(cs) => self.covered_pairs(obs).len() == candidate_pairs(cs.len()).len(),
            None => false,
        }
    }

    pub fn validate(&self) -> Result<(), PreferenceError> {
        for r in &self.records {
            let cs = self
                .candidate_sets
                .get(&r.observation_id)
                .ok_or_else(|| PreferenceError::MissingObservation(r.observation_id.clone()))?;
            r.validate_against(cs.len())?;
        }
        Ok(())
    }
}

struct StoreState {
    candidate_sets: BTreeMap<String, CandidateSet<f64>>,
    records: Vec<PreferenceRecord>,
    keys: HashSet<(String, usize, usize, String)>,
    sink: Option<(PathBuf, File)>,
}

/// Preference records plus the candidate sets they refer to.
///
/// Mutations are serialized through an internal lock, so one store can be
/// shared by many producers. With a backing file, each accepted record is
/// appended as one line before `record` returns.
pub struct PreferenceStore {
    state: Mutex<StoreState>,
}

impl Default for PreferenceStore {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl PreferenceStore {
    pub fn in_memory() -> Self {
        Self {
            state: Mutex::new(StoreState {
                candidate_sets: BTreeMap::new(),
                records: Vec::new(),
                keys: HashSet::new(),
                sink: None,
            }),
        }
    }

    /// Opens (or creates) an append-only record file. Existing records are
    /// loaded; they are validated once candidate sets are registered.
    pub fn open(records_path: impl AsRef<Path>) -> Result<Self, PreferenceError> {
        let path = records_path.as_ref().to_path_buf();
        let records = if path.exists() {
            io::read_records(&path)?
        } else {
            Vec::new()
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| PreferenceError::Io {
                path: path.clone(),
                source,
            })?;
        let keys = records.iter().map(PreferenceRecord::key).collect();
        Ok(Self {
            state: Mutex::new(StoreState {
                candidate_sets: BTreeMap::new(),
                records,
                keys,
                sink: Some((path, file)),
            }),
        })
    }

    /// Registers or replaces the candidate set of an observation.
    pub fn put_candidate_set(&self, cs: CandidateSet<f64>) {
        let mut st = self.state.lock().expect("store lock");
        st.candidate_sets.insert(cs.observation_id().to_owned(), cs);
    }

    pub fn candidate_set(&self, obs: &str) -> Option<CandidateSet<f64>> {
        self.state
            .lock()
            .expect("store lock")
            .candidate_sets
            .get(obs)
            .cloned()
    }

    pub fn observation_ids(&self) -> Vec<String> {
        self.state
            .lock()
            .expect("store lock")
            .candidate_sets
            .keys()
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.state.lock().expect("store lock").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Validates and appends a record.
    pub fn record(&self, rec: PreferenceRecord) -> Result<(), PreferenceError> {
        let mut st = self.state.lock().expect("store lock");
        let m = st
            .candidate_sets
            .get(&rec.observation_id)
            .map(CandidateSet::len)
            .ok_or_else(|| PreferenceError::MissingObservation(rec.observation_id.clone()))?;
        rec.validate_against(m)?;
        let key = rec.key();
        if st.keys.contains(&key) {
            return Err(PreferenceError::DuplicateRecord {
                obs: rec.observation_id,
                i: rec.i,
                j: rec.j,
                annotator: rec.annotator_id,
            });
        }
        if let Some((path, file)) = st.sink.as_mut() {
            let line = io::record_to_line(&rec);
            writeln!(file, "{line}")
                .and_then(|_| file.flush())
                .map_err(|source| PreferenceError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        st.keys.insert(key);
        st.records.push(rec);
        Ok(())
    }

    pub fn snapshot(&self) -> PreferenceDataset {
        let st = self.state.lock().expect("store lock");
        PreferenceDataset {
            records: st.records.clone(),
            candidate_sets: st.candidate_sets.clone(),
        }
    }
}

/// Reads a record file written by a store, line by line.
pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<PreferenceRecord>, PreferenceError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| PreferenceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| PreferenceError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(io::record_from_line(&line).map_err(|e| e.at(path, k + 1))?);
    }
    Ok(out)
}

/// Number of comparisons won by each candidate; each record is one vote.
pub fn win_counts<'a, I>(m: usize, records: I) -> Result<Vec<usize>, PreferenceError>
where
    I: IntoIterator<Item = &'a PreferenceRecord>,
{
    let mut wins = vec![0usize; m];
    for r in records {
        r.validate_against(m)?;
        wins[r.winner()] += 1;
    }
    Ok(wins)
}

/// Picks the preferred candidate `τ*`: the maximum win count, ties broken
/// toward annotator-suggested candidates, then the dataset candidate, then
/// uniformly at random with `rng`.
pub fn aggregate_best<'a, T, I, R>(
    cs: &CandidateSet<T>,
    records: I,
    rng: &mut R,
) -> Result<usize, PreferenceError>
where
    T: Scalar,
    I: IntoIterator<Item = &'a PreferenceRecord>,
    R: Rng + ?Sized,
{
    let records: Vec<&PreferenceRecord> = records.into_iter().collect();
    if records.is_empty() {
        return Err(PreferenceError::NoAnnotations(cs.observation_id().to_owned()));
    }
    let wins = win_counts(cs.len(), records.iter().copied())?;
    let best = *wins.iter().max().expect("non-empty");
    let tied: Vec<usize> = (0..cs.len()).filter(|&k| wins[k] == best).collect();
    if tied.len() == 1 {
        return Ok(tied[0]);
    }
    let suggested: Vec<usize> = tied
        .iter()
        .copied()
        .filter(|&k| cs.kind(k).is_some_and(|kind| kind.is_annotator_suggested()))
        .collect();
    match suggested.len() {
        1 => return Ok(suggested[0]),
        n if n > 1 => return Ok(suggested[rng.random_range(0..n)]),
        _ => {}
    }
    if let Some(&k) = tied.iter().find(|&&k| cs.kind(k) == Some(CandidateKind::Dataset)) {
        return Ok(k);
    }
    Ok(tied[rng.random_range(0..tied.len())])
}

/// [`aggregate_best`] with the rng seeded from a run seed and the observation id.
pub fn aggregate_seeded<'a, T, I>(
    cs: &CandidateSet<T>,
    records: I,
    seed: u64,
) -> Result<usize, PreferenceError>
where
    T: Scalar,
    I: IntoIterator<Item = &'a PreferenceRecord>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, cs.observation_id()));
    aggregate_best(cs, records, &mut rng)
}

/// Bradley–Terry preference probability `σ(r_i − r_j)`.
pub fn pref_probability<T: Scalar>(r_i: T, r_j: T) -> T {
    sigmoid(r_i - r_j)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln σ(x)` without overflow.
pub fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// One comparison outcome between two items.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Comparison {
    pub winner: usize,
    pub loser: usize,
}

impl From<&PreferenceRecord> for Comparison {
    fn from(r: &PreferenceRecord) -> Self {
        Self {
            winner: r.winner(),
            loser: r.loser(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BtConfig {
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for BtConfig {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            max_iter: 10_000,
            tol: 1e-8,
        }
    }
}

/// Fitted Bradley–Terry rewards, mean-centered.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardFit<T> {
    pub rewards: Vec<T>,
    /// Unregularized log-likelihood at the returned rewards.
    pub log_likelihood: T,
    pub iterations: usize,
    pub converged: bool,
    /// Regularized objective after every accepted step, starting at zero rewards.
    pub objective_trace: Vec<T>,
}

fn bt_log_likelihood<T: Scalar>(rewards: &[T], comps: &[Comparison]) -> T {
    comps.iter().fold(T::zero(), |acc, c| {
        acc + log_sigmoid(rewards[c.winner] - rewards[c.loser])
    })
}

fn bt_objective<T: Scalar>(rewards: &[T], comps: &[Comparison], l2: T) -> T {
    let sq = rewards.iter().fold(T::zero(), |acc, &r| acc + r * r);
    bt_log_likelihood(rewards, comps) - l2 * T::lit(0.5) * sq
}

fn bt_gradient<T: Scalar>(rewards: &[T], comps: &[Comparison], l2: T) -> Vec<T> {
    let mut g: Vec<T> = rewards.iter().map(|&r| -l2 * r).collect();
    for c in comps {
        let miss = T::one() - sigmoid(rewards[c.winner] - rewards[c.loser]);
        g[c.winner] += miss;
        g[c.loser] -= miss;
    }
    g
}

/// `a` is symmetric positive definite; Gaussian elimination with partial
/// pivoting. `None` when a pivot vanishes.
fn solve<T: Scalar>(mut a: Vec<Vec<T>>, mut b: Vec<T>) -> Option<Vec<T>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap_or(std::cmp::Ordering::Equal))?;
        if !(a[piv][col].abs() > T::lit(1e-300)) {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                let v = a[col][k];
                a[row][k] -= f * v;
            }
            let v = b[col];
            b[row] -= f * v;
        }
    }
    let mut x = vec![T::zero(); n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

/// Negated Hessian of the objective: `l2·I` plus the win-probability
/// weighted comparison Laplacian.
fn bt_curvature<T: Scalar>(rewards: &[T], comps: &[Comparison], l2: T) -> Vec<Vec<T>> {
    let n = rewards.len();
    let mut h = vec![vec![T::zero(); n]; n];
    for (k, row) in h.iter_mut().enumerate() {
        row[k] = l2;
    }
    for c in comps {
        let p = sigmoid(rewards[c.winner] - rewards[c.loser]);
        let w = p * (T::one() - p);
        h[c.winner][c.winner] += w;
        h[c.loser][c.loser] += w;
        h[c.winner][c.loser] -= w;
        h[c.loser][c.winner] -= w;
    }
    h
}

/// Maximizes the L2-regularized Bradley–Terry log-likelihood with damped
/// Newton steps (plain gradient steps when the curvature is singular); every
/// accepted step is non-decreasing in the objective.
pub fn fit_comparisons<T: Scalar>(
    comps: &[Comparison],
    n_items: usize,
    cfg: &BtConfig,
) -> Result<RewardFit<T>, PreferenceError> {
    let mut seen = vec![false; n_items];
    for c in comps {
        if c.winner >= n_items || c.loser >= n_items || c.winner == c.loser {
            return Err(PreferenceError::InvalidRecord(format!(
                "comparison ({}, {}) invalid for {n_items} items",
                c.winner, c.loser
            )));
        }
        seen[c.winner] = true;
        seen[c.loser] = true;
    }
    let missing: Vec<usize> = (0..n_items).filter(|&k| !seen[k]).collect();
    if !missing.is_empty() {
        return Err(PreferenceError::UnderIdentified(missing));
    }

    let l2 = T::lit(cfg.l2);
    let tol = T::lit(cfg.tol);
    let mut rewards = vec![T::zero(); n_items];
    let mut objective = bt_objective(&rewards, comps, l2);
    let mut trace = vec![objective];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < cfg.max_iter {
        let g = bt_gradient(&rewards, comps, l2);
        let g_inf = g.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
        if g_inf < tol {
            converged = true;
            break;
        }
        iterations += 1;
        let dir = solve(bt_curvature(&rewards, comps, l2), g.clone())
            .unwrap_or_else(|| g.iter().map(|&v| v / T::lit(comps.len().max(1) as f64)).collect());
        let mut step = T::one();
        let mut accepted = false;
        for _ in 0..60 {
            let candidate: Vec<T> = rewards.iter().zip(&dir).map(|(&r, &d)| r + step * d).collect();
            let cand_obj = bt_objective(&candidate, comps, l2);
            if cand_obj >= objective {
                accepted = candidate != rewards;
                rewards = candidate;
                objective = cand_obj;
                trace.push(objective);
                break;
            }
            step *= T::lit(0.5);
        }
        if !accepted {
            // No ascent left at machine precision.
            converged = true;
            break;
        }
    }

    let mean = rewards.iter().fold(T::zero(), |a, &r| a + r) / T::lit(n_items.max(1) as f64);
    for r in &mut rewards {
        *r -= mean;
    }
    Ok(RewardFit {
        log_likelihood: bt_log_likelihood(&rewards, comps),
        rewards,
        iterations,
        converged,
        objective_trace: trace,
    })
}

/// Fits per-candidate rewards from the records of one observation.
pub fn fit_bradley_terry<T: Scalar>(
    records: &[PreferenceRecord],
    n_items: usize,
    cfg: &BtConfig,
) -> Result<RewardFit<T>, PreferenceError> {
    let comps: Vec<Comparison> = records.iter().map(Comparison::from).collect();
    fit_comparisons(&comps, n_items, cfg)
}

/// Fits one reward per candidate kind, pooling comparisons over all
/// observations. Comparisons between two candidates of the same kind carry no
/// information about kinds and are skipped.
pub fn fit_pooled_by_kind<T: Scalar>(
    dataset: &PreferenceDataset,
    cfg: &BtConfig,
) -> Result<Vec<(CandidateKind, T)>, PreferenceError> {
    let mut pairs = Vec::new();
    for r in &dataset.records {
        let cs = dataset
            .candidate_sets
            .get(&r.observation_id)
            .ok_or_else(|| PreferenceError::MissingObservation(r.observation_id.clone()))?;
        r.validate_against(cs.len())?;
        let (wk, lk) = (cs.kind(r.winner()).unwrap(), cs.kind(r.loser()).unwrap());
        if wk != lk {
            pairs.push((wk, lk));
        }
    }
    let kinds: Vec<CandidateKind> = pairs
        .iter()
        .flat_map(|&(a, b)| [a, b])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index = |k: CandidateKind| kinds.iter().position(|&x| x == k).unwrap();
    let comps: Vec<Comparison> = pairs
        .iter()
        .map(|&(w, l)| Comparison {
            winner: index(w),
            loser: index(l),
        })
        .collect();
    let fit = fit_comparisons::<T>(&comps, kinds.len(), cfg)?;
    Ok(kinds.into_iter().zip(fit.rewards).collect())
}

/// Table-style summary of an annotated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub observations: usize,
    pub annotated_observations: usize,
    pub fully_annotated_observations: usize,
    /// Candidates per observation; `None` when sets differ in size or the store is empty.
    pub m: Option<usize>,
    pub total_candidates: usize,
    /// Fraction of annotated observations whose `τ*` is not the dataset trajectory.
    pub fraction_dataset_not_preferred: f64,
    /// Distinct (observation, unordered pair) comparisons covered by records.
    pub total_pairwise_comparisons: usize,
    pub total_records: usize,
}

/// Winner per annotated observation, in observation-id order.
pub fn aggregate_all(
    dataset: &PreferenceDataset,
    seed: u64,
) -> Result<Vec<(String, usize, CandidateKind)>, PreferenceError> {
    let mut out = Vec::new();
    for (obs, recs) in dataset.by_observation() {
        let cs = dataset
            .candidate_sets
            .get(obs)
            .ok_or_else(|| PreferenceError::MissingObservation(obs.to_owned()))?;
        let best = aggregate_seeded(cs, recs, seed)?;
        out.push((obs.to_owned(), best, cs.kind(best).expect("index in range")));
    }
    Ok(out)
}

pub fn summarize(dataset: &PreferenceDataset, seed: u64) -> Result<DatasetSummary, PreferenceError> {
    let winners = aggregate_all(dataset, seed)?;
    let sizes: BTreeSet<usize> = dataset.candidate_sets.values().map(CandidateSet::len).collect();
    let not_dataset = winners.iter().filter(|(_, k, _)| *k != 0).count();
    let total_pairwise_comparisons = dataset
        .candidate_sets
        .keys()
        .map(|obs| dataset.covered_pairs(obs).len())
        .sum();
    Ok(DatasetSummary {
        observations: dataset.candidate_sets.len(),
        annotated_observations: winners.len(),
        fully_annotated_observations: dataset
            .candidate_sets
            .keys()
            .filter(|obs| dataset.is_fully_annotated(obs))
            .count(),
        m: if sizes.len() == 1 { sizes.first().copied() } else { None },
        total_candidates: dataset.candidate_sets.values().map(CandidateSet::len).sum(),
        fraction_dataset_not_preferred: if winners.is_empty() {
            0.0
        } else {
            not_dataset as f64 / winners.len() as f64
        },
        total_pairwise_comparisons,
        total_records: dataset.records.len(),
    })
}
