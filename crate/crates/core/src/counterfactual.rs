//! Per-observation counterfactual candidate sets.
//!
//! Slot layout is fixed so candidate indices are stable across the
//! annotation service, the store and the aggregator:
//!
//! ```text
//! 0        dataset trajectory
//! 1..      rotations, alternating counter-clockwise / clockwise
//! m - 1    annotator target or stop (when the annotator gave input),
//!          otherwise one more rotation
//! ```

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    reparameterize_to_target, rotate_trajectory, FrameTag, GeometryError, Pose2, Trajectory,
    LENGTH_EPS,
};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CounterfactualError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid-config: {0}")]
    InvalidConfig(String),
    #[error("invalid-candidate-set: {0}")]
    InvalidCandidateSet(String),
}

impl CounterfactualError {
    pub fn code(&self) -> &'static str {
        match self {
            CounterfactualError::Geometry(e) => e.code(),
            CounterfactualError::InvalidConfig(_) => "invalid-config",
            CounterfactualError::InvalidCandidateSet(_) => "invalid-candidate-set",
        }
    }
}

/// Provenance of a candidate trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CandidateKind {
    Dataset,
    RotatedCcw,
    RotatedCw,
    HumanTarget,
    Stop,
}

impl CandidateKind {
    pub const ALL: [CandidateKind; 5] = [
        CandidateKind::Dataset,
        CandidateKind::RotatedCcw,
        CandidateKind::RotatedCw,
        CandidateKind::HumanTarget,
        CandidateKind::Stop,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CandidateKind::Dataset => "dataset",
            CandidateKind::RotatedCcw => "rotated_ccw",
            CandidateKind::RotatedCw => "rotated_cw",
            CandidateKind::HumanTarget => "human_target",
            CandidateKind::Stop => "stop",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.as_str() == s)
    }

    /// Targets and stop requests both come from the annotator's target step.
    pub fn is_annotator_suggested(&self) -> bool {
        matches!(self, CandidateKind::HumanTarget | CandidateKind::Stop)
    }
}

impl std::fmt::Display for CandidateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate<T> {
    pub kind: CandidateKind,
    pub trajectory: Trajectory<T>,
}

/// The `m` candidates generated for one observation; index 0 is the dataset
/// trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet<T> {
    observation_id: String,
    horizon: usize,
    candidates: Vec<Candidate<T>>,
}

impl<T: Scalar> CandidateSet<T> {
    pub fn new(
        observation_id: impl Into<String>,
        horizon: usize,
        candidates: Vec<Candidate<T>>,
    ) -> Result<Self, CounterfactualError> {
        let observation_id = observation_id.into();
        let bad = |msg: String| {
            Err(CounterfactualError::InvalidCandidateSet(format!(
                "{observation_id}: {msg}"
            )))
        };
        if candidates.len() < 2 {
            return bad(format!("needs at least 2 candidates, got {}", candidates.len()));
        }
        if candidates[0].kind != CandidateKind::Dataset {
            return bad("candidate 0 must be the dataset trajectory".into());
        }
        if candidates.iter().skip(1).any(|c| c.kind == CandidateKind::Dataset) {
            return bad("more than one dataset candidate".into());
        }
        for (k, c) in candidates.iter().enumerate() {
            if c.trajectory.len() != horizon {
                return bad(format!(
                    "candidate {k} has {} waypoints, expected {horizon}",
                    c.trajectory.len()
                ));
            }
            if c.trajectory.frame() != FrameTag::EgoStart {
                return bad(format!("candidate {k} is not in the ego_start frame"));
            }
        }
        Ok(Self {
            observation_id,
            horizon,
            candidates,
        })
    }

    pub fn observation_id(&self) -> &str {
        &self.observation_id
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn candidates(&self) -> &[Candidate<T>] {
        &self.candidates
    }

    pub fn get(&self, index: usize) -> Option<&Candidate<T>> {
        self.candidates.get(index)
    }

    pub fn kind(&self, index: usize) -> Option<CandidateKind> {
        self.candidates.get(index).map(|c| c.kind)
    }

    pub fn dataset(&self) -> &Trajectory<T> {
        &self.candidates[0].trajectory
    }
}

/// Sampling parameters for candidate generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub m: usize,
    pub n: usize,
    /// Rotation magnitude bounds in radians.
    pub rot_min: f64,
    pub rot_max: f64,
    pub rng_seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            m: 4,
            n: 8,
            rot_min: 15f64.to_radians(),
            rot_max: 45f64.to_radians(),
            rng_seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), CounterfactualError> {
        if self.m < 2 {
            return Err(CounterfactualError::InvalidConfig(format!(
                "m must be at least 2, got {}",
                self.m
            )));
        }
        if self.n < 2 {
            return Err(CounterfactualError::InvalidConfig(format!(
                "n must be at least 2, got {}",
                self.n
            )));
        }
        let ok = self.rot_min > 0.0
            && self.rot_min < self.rot_max
            && self.rot_max < std::f64::consts::PI;
        if !ok {
            return Err(CounterfactualError::InvalidConfig(format!(
                "need 0 < rot_min < rot_max < pi, got [{}, {}]",
                self.rot_min, self.rot_max
            )));
        }
        Ok(())
    }
}

/// What the annotator contributed in the target step, if anything.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnnotatorInput<T> {
    None,
    Target((T, T)),
    Stop,
}

/// Zero-motion trajectory of `n` waypoints at the ego origin.
pub fn make_stop_trajectory<T: Scalar>(n: usize) -> Trajectory<T> {
    Trajectory::new(vec![Pose2::identity(); n.max(1)], FrameTag::EgoStart)
        .expect("origin waypoints are finite")
}

/// Number of unordered pairs among `m` candidates.
pub fn pair_count(m: u64) -> u64 {
    m * m.saturating_sub(1) / 2
}

/// All unordered pairs `(i, j)` with `i < j`, in lexicographic order.
pub fn candidate_pairs(m: usize) -> Vec<(usize, usize)> {
    (0..m)
        .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
        .collect()
}

/// Stable per-observation seed derived from the run seed and observation id.
pub fn derive_seed(rng_seed: u64, observation_id: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write_u64(rng_seed);
    h.write(observation_id.as_bytes());
    h.finish()
}

/// Builds the candidate set for one observation.
///
/// Rotation draws happen in slot order before the annotator slot is filled,
/// so regenerating with the same rng state after an annotator click keeps the
/// rotated candidates unchanged.
pub fn generate_candidates<T: Scalar, R: Rng + ?Sized>(
    observation_id: &str,
    dataset_traj: &Trajectory<T>,
    input: AnnotatorInput<T>,
    cfg: &GenConfig,
    rng: &mut R,
) -> Result<CandidateSet<T>, CounterfactualError> {
    cfg.validate()?;
    if dataset_traj.len() != cfg.n {
        return Err(CounterfactualError::InvalidCandidateSet(format!(
            "{observation_id}: dataset trajectory has {} waypoints, expected {}",
            dataset_traj.len(),
            cfg.n
        )));
    }
    if dataset_traj.frame() != FrameTag::EgoStart {
        return Err(GeometryError::WrongFrame.into());
    }

    let annotated = !matches!(input, AnnotatorInput::None);
    let rotations = if annotated { cfg.m - 2 } else { cfg.m - 1 };

    let mut candidates = Vec::with_capacity(cfg.m);
    candidates.push(Candidate {
        kind: CandidateKind::Dataset,
        trajectory: dataset_traj.clone(),
    });
    for k in 0..rotations {
        let magnitude = rng.random_range(cfg.rot_min..=cfg.rot_max);
        let (kind, angle) = if k % 2 == 0 {
            (CandidateKind::RotatedCcw, magnitude)
        } else {
            (CandidateKind::RotatedCw, -magnitude)
        };
        candidates.push(Candidate {
            kind,
            trajectory: rotate_trajectory(dataset_traj, T::lit(angle))?,
        });
    }
    match input {
        AnnotatorInput::None => {}
        AnnotatorInput::Stop => candidates.push(Candidate {
            kind: CandidateKind::Stop,
            trajectory: make_stop_trajectory(cfg.n),
        }),
        AnnotatorInput::Target(target) => {
            if dataset_traj.arc_length() < T::lit(LENGTH_EPS) {
                return Err(GeometryError::DegeneratePath.into());
            }
            candidates.push(Candidate {
                kind: CandidateKind::HumanTarget,
                trajectory: reparameterize_to_target(dataset_traj, target, cfg.n)?,
            });
        }
    }
    CandidateSet::new(observation_id, cfg.n, candidates)
}

/// [`generate_candidates`] with the rng seeded from `cfg.rng_seed` and the
/// observation id.
pub fn generate_for_observation<T: Scalar>(
    observation_id: &str,
    dataset_traj: &Trajectory<T>,
    input: AnnotatorInput<T>,
    cfg: &GenConfig,
) -> Result<CandidateSet<T>, CounterfactualError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, observation_id));
    generate_candidates(observation_id, dataset_traj, input, cfg, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight() -> Trajectory<f64> {
        let pts: Vec<_> = (1..=8).map(|k| (0.25 * k as f64, 0.0)).collect();
        Trajectory::from_positions(&pts, FrameTag::EgoStart).unwrap()
    }

    #[test]
    fn stop_trajectory() {
        let s = make_stop_trajectory::<f64>(8);
        assert_eq!(s.len(), 8);
        assert!(s.waypoints().iter().all(|p| *p == Pose2::identity()));
        assert_eq!(make_stop_trajectory::<f64>(2).len(), 2);
        assert_eq!(s.frame(), FrameTag::EgoStart);
    }

    #[test]
    fn pair_counts() {
        assert_eq!(pair_count(4), 6);
        assert_eq!(pair_count(2), 1);
        assert_eq!(187_920 * pair_count(4), 1_127_520);
        // Enumerated pairs agree with the closed form.
        for m in 2..=12 {
            assert_eq!(candidate_pairs(m).len() as u64, pair_count(m as u64));
        }
        assert_eq!(candidate_pairs(10).len(), 45);
    }

    #[test]
    fn stop_layout() {
        let cfg = GenConfig::default();
        let cs = generate_for_observation("o1", &straight(), AnnotatorInput::Stop, &cfg).unwrap();
        let kinds: Vec<_> = cs.candidates().iter().map(|c| c.kind).collect();
        assert_eq!(
            kinds,
            vec![
                CandidateKind::Dataset,
                CandidateKind::RotatedCcw,
                CandidateKind::RotatedCw,
                CandidateKind::Stop
            ]
        );
        assert_eq!(cs.dataset(), &straight());
    }

    #[test]
    fn target_slot_hits_click() {
        let cfg = GenConfig::default();
        let cs = generate_for_observation("o1", &straight(), AnnotatorInput::Target((0.0, 2.0)), &cfg)
            .unwrap();
        let last = cs.get(3).unwrap();
        assert_eq!(last.kind, CandidateKind::HumanTarget);
        let end = last.trajectory.last();
        assert!(end.x.abs() < 1e-6 && (end.y - 2.0).abs() < 1e-6);
    }

    #[test]
    fn unannotated_layout_alternates() {
        let cfg = GenConfig::default();
        let cs = generate_for_observation("o1", &straight(), AnnotatorInput::None, &cfg).unwrap();
        let kinds: Vec<_> = cs.candidates().iter().map(|c| c.kind).collect();
        assert_eq!(
            kinds,
            vec![
                CandidateKind::Dataset,
                CandidateKind::RotatedCcw,
                CandidateKind::RotatedCw,
                CandidateKind::RotatedCcw
            ]
        );
    }

    #[test]
    fn click_keeps_rotations() {
        let cfg = GenConfig::default();
        let a = generate_for_observation("obs-7", &straight(), AnnotatorInput::None, &cfg).unwrap();
        let b = generate_for_observation("obs-7", &straight(), AnnotatorInput::Stop, &cfg).unwrap();
        assert_eq!(a.candidates()[..3], b.candidates()[..3]);
    }

    #[test]
    fn degenerate_dataset_with_click() {
        let cfg = GenConfig::default();
        let still = make_stop_trajectory::<f64>(8);
        let err = generate_for_observation("o", &still, AnnotatorInput::Target((1.0, 1.0)), &cfg);
        assert_eq!(err, Err(CounterfactualError::Geometry(GeometryError::DegeneratePath)));
        // Without a click the stationary dataset path is still usable.
        assert!(generate_for_observation("o", &still, AnnotatorInput::None, &cfg).is_ok());
    }

    #[test]
    fn config_validation() {
        let mut cfg = GenConfig::default();
        cfg.m = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = GenConfig::default();
        cfg.rot_min = 0.9;
        assert!(cfg.validate().is_err());
        let mut cfg = GenConfig::default();
        cfg.rot_max = 4.0;
        assert!(cfg.validate().is_err());
        assert!(GenConfig::default().validate().is_ok());
    }

    #[test]
    fn wrong_length_rejected() {
        let cfg = GenConfig { n: 6, ..GenConfig::default() };
        assert!(matches!(
            generate_for_observation("o", &straight(), AnnotatorInput::None, &cfg),
            Err(CounterfactualError::InvalidCandidateSet(_))
        ));
    }

    #[test]
    fn kind_strings() {
        for k in CandidateKind::ALL {
            assert_eq!(CandidateKind::parse(k.as_str()), Some(k));
        }
        assert_eq!(CandidateKind::parse("nope"), None);
    }
}
