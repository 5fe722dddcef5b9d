//! Waypoint-predicting MLP: scan and goal in, `N` ego-frame positions out.
//!
//! Parameters live in one flat vector so gradients, momentum buffers and
//! finite-difference checks all share a single layout:
//! `W1 (H x in) | b1 | W2 (H x H) | b2 | W3 (out x H) | b3`, row-major.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counterfactual::CandidateKind;
use crate::geometry::{heading_from_positions, FrameTag, Pose2, Trajectory};
use crate::metrics::LaserScan;
use crate::preference::{aggregate_seeded, PreferenceDataset, PreferenceError};
use crate::scalar::Scalar;
use crate::sim::Demonstration;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid-argument: {0}")]
    InvalidArgument(String),
    #[error("training-diverged: loss is not finite at epoch {epoch}")]
    TrainingDiverged { epoch: usize },
    #[error(transparent)]
    Preference(#[from] PreferenceError),
}

impl PolicyError {
    pub fn code(&self) -> &'static str {
        match self {
            PolicyError::InvalidArgument(_) => "invalid-argument",
            PolicyError::TrainingDiverged { .. } => "training-diverged",
            PolicyError::Preference(e) => e.code(),
        }
    }
}

pub const MOMENTUM: f64 = 0.9;

/// Input encoding parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub n_beams: usize,
    /// Goal offsets are divided by this and clipped to [-1, 1].
    pub goal_scale: f64,
    /// Ranges are clipped here before normalization; 0 uses the scan's
    /// max range.
    pub range_clip: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            n_beams: 64,
            goal_scale: 5.0,
            range_clip: 4.0,
        }
    }
}

impl FeatureConfig {
    pub fn len(&self) -> usize {
        self.n_beams + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Normalized ranges followed by the clipped goal offset.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVec<T> {
    pub values: Vec<T>,
}

pub fn encode_features<T: Scalar>(
    scan: &LaserScan<T>,
    goal: (T, T),
    cfg: &FeatureConfig,
) -> Result<FeatureVec<T>, PolicyError> {
    if scan.ranges.len() != cfg.n_beams {
        return Err(PolicyError::InvalidArgument(format!(
            "scan has {} beams, expected {}",
            scan.ranges.len(),
            cfg.n_beams
        )));
    }
    if !(scan.max_range > T::zero()) {
        return Err(PolicyError::InvalidArgument("max_range must be positive".into()));
    }
    let one = T::one();
    let scale = T::lit(cfg.goal_scale);
    let clip = if cfg.range_clip > 0.0 {
        T::lit(cfg.range_clip).min(scan.max_range)
    } else {
        scan.max_range
    };
    let mut values: Vec<T> = scan
        .ranges
        .iter()
        .map(|&r| (r / clip).max(T::zero()).min(one))
        .collect();
    values.push((goal.0 / scale).max(-one).min(one));
    values.push((goal.1 / scale).max(-one).min(one));
    Ok(FeatureVec { values })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bc,
    Chop,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Bc => "bc",
            LossKind::Chop => "chop",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bc" => Some(LossKind::Bc),
            "chop" => Some(LossKind::Chop),
            _ => None,
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Three-layer tanh MLP with a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<T> {
    pub n_in: usize,
    pub hidden: usize,
    pub horizon: usize,
    pub output_scale: T,
    pub theta: Vec<T>,
}

struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    end: usize,
}

impl<T: Scalar> PolicyParams<T> {
    fn layout(&self) -> Layout {
        Self::layout_for(self.n_in, self.hidden, 2 * self.horizon)
    }

    fn layout_for(n_in: usize, h: usize, n_out: usize) -> Layout {
        let w1 = 0;
        let b1 = w1 + h * n_in;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + n_out * h;
        Layout {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            end: b3 + n_out,
        }
    }

    pub fn param_count(n_in: usize, hidden: usize, horizon: usize) -> usize {
        Self::layout_for(n_in, hidden, 2 * horizon).end
    }

    pub fn zeros(n_in: usize, hidden: usize, horizon: usize, output_scale: T) -> Self {
        Self {
            n_in,
            hidden,
            horizon,
            output_scale,
            theta: vec![T::zero(); Self::param_count(n_in, hidden, horizon)],
        }
    }

    /// Uniform weights in `±init_scale / sqrt(fan_in)`, zero biases.
    pub fn init<R: Rng + ?Sized>(
        n_in: usize,
        hidden: usize,
        horizon: usize,
        output_scale: T,
        init_scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(n_in, hidden, horizon, output_scale);
        let l = p.layout();
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, theta: &mut [T]| {
            let bound = init_scale / (fan_in as f64).sqrt();
            for w in &mut theta[range] {
                *w = T::lit(rng.random_range(-bound..=bound));
            }
        };
        fill(l.w1..l.b1, n_in, &mut p.theta);
        fill(l.w2..l.b2, hidden, &mut p.theta);
        fill(l.w3..l.b3, hidden, &mut p.theta);
        p
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> PolicyParams<U> {
        PolicyParams {
            n_in: self.n_in,
            hidden: self.hidden,
            horizon: self.horizon,
            output_scale: U::lit(self.output_scale.as_f64()),
            theta: self.theta.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    fn check_input(&self, x: &[T]) -> Result<(), PolicyError> {
        if x.len() != self.n_in {
            return Err(PolicyError::InvalidArgument(format!(
                "feature length {} does not match network input {}",
                x.len(),
                self.n_in
            )));
        }
        Ok(())
    }
}

fn dense<T: Scalar>(w: &[T], b: &[T], x: &[T], out: &mut [T]) {
    let n_in = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * n_in..(r + 1) * n_in];
        let mut acc = b[r];
        for (wi, xi) in row.iter().zip(x) {
            acc += *wi * *xi;
        }
        *o = acc.tanh();
    }
}

struct Forward<T> {
    a1: Vec<T>,
    a2: Vec<T>,
    y: Vec<T>,
}

fn forward<T: Scalar>(p: &PolicyParams<T>, x: &[T]) -> Forward<T> {
    let l = p.layout();
    let h = p.hidden;
    let mut a1 = vec![T::zero(); h];
    let mut a2 = vec![T::zero(); h];
    let mut y = vec![T::zero(); 2 * p.horizon];
    dense(&p.theta[l.w1..l.b1], &p.theta[l.b1..l.w2], x, &mut a1);
    dense(&p.theta[l.w2..l.b2], &p.theta[l.b2..l.w3], &a1, &mut a2);
    dense(&p.theta[l.w3..l.b3], &p.theta[l.b3..l.end], &a2, &mut y);
    Forward { a1, a2, y }
}

fn positions<T: Scalar>(p: &PolicyParams<T>, y: &[T]) -> Vec<(T, T)> {
    y.chunks_exact(2)
        .map(|c| (c[0] * p.output_scale, c[1] * p.output_scale))
        .collect()
}

/// Predicted ego-frame trajectory; headings follow the polyline.
pub fn predict<T: Scalar>(params: &PolicyParams<T>, features: &FeatureVec<T>) -> Result<Trajectory<T>, PolicyError> {
    params.check_input(&features.values)?;
    let f = forward(params, &features.values);
    let pos = positions(params, &f.y);
    let headings = heading_from_positions(&pos);
    let wps = pos
        .iter()
        .zip(headings)
        .map(|(&(x, y), th)| Pose2::new(x, y, th))
        .collect();
    Trajectory::new(wps, FrameTag::EgoStart)
        .map_err(|e| PolicyError::InvalidArgument(format!("non-finite prediction: {e}")))
}

fn check_target<T: Scalar>(params: &PolicyParams<T>, target: &Trajectory<T>) -> Result<(), PolicyError> {
    if target.len() != params.horizon {
        return Err(PolicyError::InvalidArgument(format!(
            "target has {} waypoints, network predicts {}",
            target.len(),
            params.horizon
        )));
    }
    Ok(())
}

fn sample_loss<T: Scalar>(p: &PolicyParams<T>, y: &[T], target: &Trajectory<T>) -> T {
    let n = T::lit(p.horizon as f64);
    positions(p, y)
        .iter()
        .zip(target.waypoints())
        .fold(T::zero(), |acc, (&(x, yy), t)| {
            acc + (x - t.x) * (x - t.x) + (yy - t.y) * (yy - t.y)
        })
        / n
}

/// Mean squared waypoint distance between prediction and target. The loss
/// kind only selects which target the caller supplies; the form is shared.
pub fn loss<T: Scalar>(
    params: &PolicyParams<T>,
    features: &FeatureVec<T>,
    target: &Trajectory<T>,
    _kind: LossKind,
) -> Result<T, PolicyError> {
    params.check_input(&features.values)?;
    check_target(params, target)?;
    let f = forward(params, &features.values);
    Ok(sample_loss(params, &f.y, target))
}

/// Adds the gradient of one sample's loss into `acc` and returns the loss.
fn accumulate_grad<T: Scalar>(p: &PolicyParams<T>, x: &[T], target: &Trajectory<T>, acc: &mut [T]) -> T {
    let l = p.layout();
    let (h, n_out) = (p.hidden, 2 * p.horizon);
    let f = forward(p, x);
    let two_over_n = T::lit(2.0 / p.horizon as f64);
    let s = p.output_scale;
    let one = T::one();

    let mut dz3 = vec![T::zero(); n_out];
    for (k, t) in target.waypoints().iter().enumerate() {
        for (c, tv) in [(0, t.x), (1, t.y)] {
            let idx = 2 * k + c;
            let y = f.y[idx];
            let dpos = two_over_n * (s * y - tv);
            dz3[idx] = dpos * s * (one - y * y);
        }
    }
    let mut dz2 = vec![T::zero(); h];
    for r in 0..n_out {
        let g = dz3[r];
        acc[l.b3 + r] += g;
        let row = l.w3 + r * h;
        for c in 0..h {
            acc[row + c] += g * f.a2[c];
            dz2[c] += g * p.theta[row + c];
        }
    }
    for c in 0..h {
        dz2[c] *= one - f.a2[c] * f.a2[c];
    }
    let mut dz1 = vec![T::zero(); h];
    for r in 0..h {
        let g = dz2[r];
        acc[l.b2 + r] += g;
        let row = l.w2 + r * h;
        for c in 0..h {
            acc[row + c] += g * f.a1[c];
            dz1[c] += g * p.theta[row + c];
        }
    }
    for c in 0..h {
        dz1[c] *= one - f.a1[c] * f.a1[c];
    }
    let n_in = p.n_in;
    for r in 0..h {
        let g = dz1[r];
        acc[l.b1 + r] += g;
        let row = l.w1 + r * n_in;
        for c in 0..n_in {
            acc[row + c] += g * x[c];
        }
    }
    sample_loss(p, &f.y, target)
}

/// One supervised example: encoded observation and the trajectory to imitate.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair<T> {
    pub observation_id: String,
    pub features: FeatureVec<T>,
    pub target: Trajectory<T>,
    pub target_kind: CandidateKind,
}

/// Exact gradient of the mean batch loss, summed in batch order.
pub fn grad<T: Scalar>(params: &PolicyParams<T>, batch: &[&TrainingPair<T>], _kind: LossKind) -> Result<Vec<T>, PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::InvalidArgument("empty batch".into()));
    }
    let mut acc = vec![T::zero(); params.theta.len()];
    for s in batch {
        params.check_input(&s.features.values)?;
        check_target(params, &s.target)?;
        accumulate_grad(params, &s.features.values, &s.target, &mut acc);
    }
    let n = T::lit(batch.len() as f64);
    for g in &mut acc {
        *g /= n;
    }
    Ok(acc)
}

/// Mean loss over a dataset.
pub fn dataset_loss<T: Scalar>(params: &PolicyParams<T>, data: &[TrainingPair<T>]) -> T {
    let total = data.iter().fold(T::zero(), |acc, s| {
        let f = forward(params, &s.features.values);
        acc + sample_loss(params, &f.y, &s.target)
    });
    total / T::lit(data.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss_kind: LossKind,
    pub hidden: usize,
    pub init_scale: f64,
    pub output_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 32,
            epochs: 300,
            seed: 0,
            loss_kind: LossKind::Bc,
            hidden: 64,
            init_scale: 1.0,
            output_scale: 3.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(PolicyError::InvalidArgument("learning_rate must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(PolicyError::InvalidArgument(
                "epochs, batch_size and hidden must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput<T> {
    pub params: PolicyParams<T>,
    /// Full-dataset mean loss after each epoch.
    pub loss_curve: Vec<T>,
}

/// Mini-batch SGD with momentum. The shuffle order is drawn from a
/// `cfg.seed`-seeded generator, so equal inputs give bitwise-equal output.
pub fn train<T: Scalar>(data: &[TrainingPair<T>], cfg: &TrainConfig) -> Result<TrainOutput<T>, PolicyError> {
    cfg.validate()?;
    let first = data
        .first()
        .ok_or_else(|| PolicyError::InvalidArgument("empty training set".into()))?;
    let n_in = first.features.values.len();
    let horizon = first.target.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = PolicyParams::init(
        n_in,
        cfg.hidden,
        horizon,
        T::lit(cfg.output_scale),
        cfg.init_scale,
        &mut rng,
    );
    for s in data {
        params.check_input(&s.features.values)?;
        check_target(&params, &s.target)?;
    }

    let lr = T::lit(cfg.learning_rate);
    let mu = T::lit(MOMENTUM);
    let mut velocity = vec![T::zero(); params.theta.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut acc = vec![T::zero(); params.theta.len()];

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            acc.iter_mut().for_each(|g| *g = T::zero());
            for &k in chunk {
                accumulate_grad(&params, &data[k].features.values, &data[k].target, &mut acc);
            }
            let inv = T::one() / T::lit(chunk.len() as f64);
            for ((w, v), g) in params.theta.iter_mut().zip(&mut velocity).zip(&acc) {
                *v = mu * *v - lr * *g * inv;
                *w += *v;
            }
        }
        let l = dataset_loss(&params, data);
        if !l.is_finite() || !params.is_finite() {
            return Err(PolicyError::TrainingDiverged { epoch });
        }
        loss_curve.push(l);
    }
    Ok(TrainOutput { params, loss_curve })
}

/// Pairs every demonstration with its supervision target: the recorded
/// trajectory for `bc`, the aggregated most-preferred candidate for `chop`.
pub fn distill_targets(
    demos: &[Demonstration],
    prefs: &PreferenceDataset,
    mode: LossKind,
    features: &FeatureConfig,
    aggregation_seed: u64,
) -> Result<Vec<TrainingPair<f64>>, PolicyError> {
    let by_obs = prefs.by_observation();
    let mut out = Vec::with_capacity(demos.len());
    for d in demos {
        let id = &d.frame.observation_id;
        let cs = prefs
            .candidate_sets
            .get(id)
            .ok_or_else(|| PreferenceError::MissingObservation(id.clone()))?;
        let (target, target_kind) = match mode {
            LossKind::Bc => (cs.dataset().clone(), CandidateKind::Dataset),
            LossKind::Chop => {
                let recs = by_obs
                    .get(id.as_str())
                    .ok_or_else(|| PreferenceError::NoAnnotations(id.clone()))?;
                let best = aggregate_seeded(cs, recs.iter().copied(), aggregation_seed)?;
                let c = &cs.candidates()[best];
                (c.trajectory.clone(), c.kind)
            }
        };
        out.push(TrainingPair {
            observation_id: id.clone(),
            features: encode_features(&d.frame.scan, d.frame.goal, features)?,
            target,
            target_kind,
        });
    }
    Ok(out)
}

pub fn cast_pairs<U: Scalar>(pairs: &[TrainingPair<f64>]) -> Vec<TrainingPair<U>> {
    pairs
        .iter()
        .map(|p| TrainingPair {
            observation_id: p.observation_id.clone(),
            features: FeatureVec {
                values: p.features.values.iter().map(|&v| U::lit(v)).collect(),
            },
            target: p.target.cast(),
            target_kind: p.target_kind,
        })
        .collect()
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerBlob {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Text checkpoint: architecture, provenance and row-major weights.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub n_in: usize,
    pub hidden: usize,
    pub horizon: usize,
    pub output_scale: f64,
    pub features: FeatureConfig,
    pub train: TrainConfig,
    pub layers: Vec<LayerBlob>,
}

impl Checkpoint {
    pub fn from_params<T: Scalar>(p: &PolicyParams<T>, features: FeatureConfig, train: TrainConfig) -> Self {
        let l = p.layout();
        let v = |r: std::ops::Range<usize>| p.theta[r].iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        let (h, n_out) = (p.hidden, 2 * p.horizon);
        Self {
            version: CHECKPOINT_VERSION,
            n_in: p.n_in,
            hidden: h,
            horizon: p.horizon,
            output_scale: p.output_scale.as_f64(),
            features,
            train,
            layers: vec![
                LayerBlob { rows: h, cols: p.n_in, weights: v(l.w1..l.b1), bias: v(l.b1..l.w2) },
                LayerBlob { rows: h, cols: h, weights: v(l.w2..l.b2), bias: v(l.b2..l.w3) },
                LayerBlob { rows: n_out, cols: h, weights: v(l.w3..l.b3), bias: v(l.b3..l.end) },
            ],
        }
    }

    pub fn to_params<T: Scalar>(&self) -> Result<PolicyParams<T>, PolicyError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(PolicyError::InvalidArgument(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        let expect = [
            (self.hidden, self.n_in),
            (self.hidden, self.hidden),
            (2 * self.horizon, self.hidden),
        ];
        if self.layers.len() != 3 {
            return Err(PolicyError::InvalidArgument("checkpoint needs 3 layers".into()));
        }
        let mut theta = Vec::with_capacity(PolicyParams::<T>::param_count(self.n_in, self.hidden, self.horizon));
        for (layer, (rows, cols)) in self.layers.iter().zip(expect) {
            if layer.rows != rows || layer.cols != cols || layer.weights.len() != rows * cols || layer.bias.len() != rows {
                return Err(PolicyError::InvalidArgument(format!(
                    "layer shape mismatch: expected {rows}x{cols}"
                )));
            }
            theta.extend(layer.weights.iter().chain(&layer.bias).map(|&v| T::lit(v)));
        }
        let p = PolicyParams {
            n_in: self.n_in,
            hidden: self.hidden,
            horizon: self.horizon,
            output_scale: T::lit(self.output_scale),
            theta,
        };
        if !p.is_finite() {
            return Err(PolicyError::InvalidArgument("non-finite parameters".into()));
        }
        Ok(p)
    }
}

/// `epoch,loss` table with a header row.
pub fn loss_curve_csv<T: Scalar>(curve: &[T]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (k, l) in curve.iter().enumerate() {
        s.push_str(&format!("{},{}\n", k + 1, l.as_f64()));
    }
    s
}

/// Centered moving average over `window` epochs.
pub fn smooth(curve: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || curve.len() < window {
        return curve.to_vec();
    }
    curve
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scan(ranges: Vec<f64>) -> LaserScan<f64> {
        LaserScan {
            angle_min: -1.0,
            angle_increment: 0.1,
            ranges,
            max_range: 10.0,
        }
    }

    #[test]
    fn feature_examples() {
        let cfg = FeatureConfig {
            n_beams: 4,
            goal_scale: 5.0,
            range_clip: 0.0,
        };
        let f = encode_features(&scan(vec![10.0; 4]), (0.0, 0.0), &cfg).unwrap();
        assert_eq!(f.values, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        let f = encode_features(&scan(vec![5.0, 10.0, 10.0, 10.0]), (100.0, 0.0), &cfg).unwrap();
        assert_eq!(f.values[0], 0.5);
        assert_eq!(&f.values[4..], &[1.0, 0.0]);
        assert!(encode_features(&scan(vec![1.0; 3]), (0.0, 0.0), &cfg).is_err());

        let clipped = FeatureConfig { range_clip: 4.0, ..cfg };
        let f = encode_features(&scan(vec![1.0, 4.0, 6.0, 10.0]), (0.0, 0.0), &clipped).unwrap();
        assert_eq!(&f.values[..4], &[0.25, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_network_predicts_stop() {
        let p = PolicyParams::<f64>::zeros(6, 8, 8, 3.0);
        let f = FeatureVec { values: vec![0.3; 6] };
        let t = predict(&p, &f).unwrap();
        assert_eq!(t.len(), 8);
        assert!(t.waypoints().iter().all(|w| *w == Pose2::identity()));
    }

    #[test]
    fn loss_examples() {
        let p = PolicyParams::<f64>::zeros(6, 8, 8, 3.0);
        let f = FeatureVec { values: vec![0.0; 6] };
        let pts = vec![(1.0, 0.0); 8];
        let target = Trajectory::from_positions(&pts, FrameTag::EgoStart).unwrap();
        assert_eq!(loss(&p, &f, &target, LossKind::Bc).unwrap(), 1.0);
        let stop = Trajectory::new(vec![Pose2::identity(); 8], FrameTag::EgoStart).unwrap();
        assert_eq!(loss(&p, &f, &stop, LossKind::Chop).unwrap(), 0.0);
    }

    #[test]
    fn zero_gradient_at_exact_fit() {
        let p = PolicyParams::<f64>::zeros(6, 8, 8, 3.0);
        let pair = TrainingPair {
            observation_id: "o".into(),
            features: FeatureVec { values: vec![0.5; 6] },
            target: Trajectory::new(vec![Pose2::identity(); 8], FrameTag::EgoStart).unwrap(),
            target_kind: CandidateKind::Stop,
        };
        let g = grad(&p, &[&pair], LossKind::Bc).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = PolicyParams::<f64>::init(6, 5, 4, 3.0, 1.0, &mut rng);
        let ck = Checkpoint::from_params(&p, FeatureConfig { n_beams: 4, goal_scale: 5.0, range_clip: 0.0 }, TrainConfig::default());
        let json = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_params::<f64>().unwrap(), p);
    }

    #[test]
    fn empty_training_set_is_rejected() {
        assert!(train::<f64>(&[], &TrainConfig::default()).is_err());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn curve_csv_and_smoothing() {
        assert_eq!(loss_curve_csv(&[0.5_f64, 0.25]), "epoch,loss\n1,0.5\n2,0.25\n");
        assert_eq!(smooth(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
    }
}
