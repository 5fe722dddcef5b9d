//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cfpref_cli::pipeline::{
    auto_annotate_all, evaluate_offline, generate_data, network_policy, preference_dataset, simulate, split,
    train_policy, RunConfig,
};
use cfpref_core::counterfactual::{
    candidate_pairs, generate_for_observation, pair_count, AnnotatorInput, CandidateKind, GenConfig,
};
use cfpref_core::executor::{accept_new_path, run_episode, EpisodeConfig, EpisodeLog, PathManager, PathMsg};
use cfpref_core::geometry::{reparameterize_to_target, rotate_trajectory, FrameTag, Pose2, Trajectory};
use cfpref_core::metrics::{deviation, min_clearance, path_completion, scan_to_points, MetricConfig, ObstacleCloud};
use cfpref_core::policy::{grad, loss, FeatureVec, LossKind, PolicyParams, TrainingPair};
use cfpref_core::preference::{
    aggregate_best, aggregate_seeded, fit_comparisons, pref_probability, summarize, BtConfig, Comparison,
    PreferenceRecord, PreferenceStore, Source,
};
use cfpref_core::sim::{
    auto_annotate, cast_scan, oracle_target, Bounds, Circle, LidarConfig, OracleConfig, Scenario, ScenarioId,
    Segment, SensorFrame, TargetProviderConfig, World,
};

// Criterion 1.
const REFERENCE_OBSERVATIONS: u64 = 187_920;
const REFERENCE_COMPARISONS: u64 = 1_127_520;
// Criterion 2.
const SHAPE_CASES: usize = 1000;
const ROTATION_TOL: f64 = 1e-9;
const ENDPOINT_TOL: f64 = 1e-6;
// Criterion 3.
const BT_SEEDS: u64 = 100;
const BT_SAMPLES_PER_PAIR: usize = 200;
const BT_MIN_EXACT: usize = 95;
const PREF_2_0: f64 = 0.8807970779;
const PREF_TOL: f64 = 1e-9;
// Criterion 4.
const TIE_RERUNS: usize = 100;
// Criterion 5.
const CLEARANCE_TOL: f64 = 0.01;
const INTERP_STEP: f64 = 0.05;
const OFFSET_TOL: f64 = 1e-12;
// Criterion 6.
const FD_COORDS: usize = 200;
const FD_SAMPLES: usize = 10;
const FD_STEP: f64 = 1e-5;
const FD_MAX_REL: f64 = 1e-4;
const FD_REL_FLOOR: f64 = 1e-6;
// Criterion 7.
const BENCH_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const BENCH_MIN_OBSERVATIONS: usize = 1000;
const NEAR_COLLISION_REDUCTION: f64 = 0.20;
const SIM_EPISODES: usize = 5;
// Criterion 9.
const FRAME_TOL: f64 = 1e-9;
const FRAME_CASES: usize = 1000;
// Criterion 10.
const MIN_SIGMA_OMEGA: f64 = 0.2;
const NOT_DATASET_MAJORITY: f64 = 0.5;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn straight(n: usize, step: f64) -> Trajectory<f64> {
    let pts: Vec<_> = (1..=n).map(|k| (step * k as f64, 0.0)).collect();
    Trajectory::from_positions(&pts, FrameTag::EgoStart).unwrap()
}

fn random_forward_path(rng: &mut ChaCha8Rng, n: usize) -> Trajectory<f64> {
    let (mut x, mut y) = (0.0, 0.0);
    let pts: Vec<_> = (0..n)
        .map(|_| {
            x += rng.random_range(0.05..0.4);
            y += rng.random_range(-0.3..0.3);
            (x, y)
        })
        .collect();
    Trajectory::from_positions(&pts, FrameTag::EgoStart).unwrap()
}

fn rec(obs: &str, winner: usize, loser: usize) -> PreferenceRecord {
    PreferenceRecord {
        observation_id: obs.into(),
        i: winner.min(loser),
        j: winner.max(loser),
        preferred_i: winner < loser,
        annotator_id: "a".into(),
        source: Source::Human,
    }
}

fn c1_combinatorics() -> Outcome {
    ensure(pair_count(4) == 6, || format!("pair_count(4) = {}", pair_count(4)))?;
    ensure(candidate_pairs(4).len() == 6, || "enumeration".into())?;
    let total = REFERENCE_OBSERVATIONS * pair_count(4);
    ensure(total == REFERENCE_COMPARISONS, || format!("{total}"))?;
    let path = straight(8, 0.25);
    for k in [1usize, 5, 40] {
        let store = PreferenceStore::in_memory();
        for n in 0..k {
            let obs = format!("o{n}");
            let cs = generate_for_observation(&obs, &path, AnnotatorInput::Target((1.5, 0.5)), &GenConfig::default())
                .map_err(|e| e.to_string())?;
            store.put_candidate_set(cs);
            for (i, j) in candidate_pairs(4) {
                store.record(rec(&obs, i, j)).map_err(|e| e.to_string())?;
            }
        }
        let s = summarize(&store.snapshot(), 0).map_err(|e| e.to_string())?;
        ensure(s.total_pairwise_comparisons == 6 * k, || {
            format!("k={k}: {} comparisons", s.total_pairwise_comparisons)
        })?;
    }
    Ok(format!("pair_count(4)=6, {REFERENCE_OBSERVATIONS}*6={total}, summary 6k for k in {{1,5,40}}"))
}

fn c2_shape() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_rot: f64 = 0.0;
    let mut worst_end: f64 = 0.0;
    for _ in 0..SHAPE_CASES {
        let n = rng.random_range(2..=12);
        let t = random_forward_path(&mut rng, n);
        let angle = rng.random_range(-PI..PI);
        let r = rotate_trajectory(&t, angle).map_err(|e| e.to_string())?;
        let (p, q) = (t.positions(), r.positions());
        for a in 0..n {
            for b in a + 1..n {
                let d0 = (p[a].0 - p[b].0).hypot(p[a].1 - p[b].1);
                let d1 = (q[a].0 - q[b].0).hypot(q[a].1 - q[b].1);
                worst_rot = worst_rot.max((d0 - d1).abs());
            }
        }
        let end = t.last().position();
        let radius = rng.random_range(0.3..3.0) * end.0.hypot(end.1);
        let bearing = end.1.atan2(end.0) + rng.random_range(-1.2..1.2);
        let target = (radius * bearing.cos(), radius * bearing.sin());
        let out = reparameterize_to_target(&t, target, 8).map_err(|e| e.to_string())?;
        let last = out.last();
        worst_end = worst_end.max((last.x - target.0).hypot(last.y - target.1));
    }
    ensure(worst_rot <= ROTATION_TOL, || format!("rotation error {worst_rot:e}"))?;
    ensure(worst_end <= ENDPOINT_TOL, || format!("endpoint error {worst_end:e}"))?;
    Ok(format!("{SHAPE_CASES} cases: max pairwise diff {worst_rot:.1e}, max endpoint miss {worst_end:.1e}"))
}

fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    let mut n = 0.0;
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            s += ((a[i] - a[j]) * (b[i] - b[j])).signum();
            n += 1.0;
        }
    }
    s / n
}

fn c3_bradley_terry() -> Outcome {
    let truth = [2.0, 1.0, 0.0, -1.0];
    let mut exact = 0;
    for seed in 0..BT_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut comps = Vec::new();
        for (i, j) in candidate_pairs(4) {
            for _ in 0..BT_SAMPLES_PER_PAIR {
                let i_wins = rng.random::<f64>() < pref_probability(truth[i], truth[j]);
                let (winner, loser) = if i_wins { (i, j) } else { (j, i) };
                comps.push(Comparison { winner, loser });
            }
        }
        let fit = fit_comparisons::<f64>(&comps, 4, &BtConfig::default()).map_err(|e| e.to_string())?;
        if fit.converged && kendall_tau(&fit.rewards, &truth) == 1.0 {
            exact += 1;
        }
    }
    let p = pref_probability(2.0f64, 0.0);
    ensure(exact >= BT_MIN_EXACT, || format!("tau = 1 on {exact}/{BT_SEEDS} seeds"))?;
    ensure((p - PREF_2_0).abs() <= PREF_TOL, || format!("pref_probability(2, 0) = {p}"))?;
    Ok(format!("tau = 1 on {exact}/{BT_SEEDS} seeds, pref_probability(2, 0) = {p:.10}"))
}

fn c4_aggregation() -> Outcome {
    let path = straight(8, 0.25);
    let gen = GenConfig::default();
    let cs = generate_for_observation("o", &path, AnnotatorInput::Target((1.5, 0.8)), &gen).map_err(|e| e.to_string())?;
    let stop = generate_for_observation("s", &path, AnnotatorInput::Stop, &gen).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut best = |cs, r: &[PreferenceRecord]| aggregate_best(cs, r.iter(), &mut rng).map_err(|e| e.to_string());
    // human target vs dataset, one win each.
    ensure(best(&cs, &[rec("o", 3, 1), rec("o", 0, 2)])? == 3, || "human target must beat dataset".into())?;
    // dataset vs rotated.
    ensure(best(&cs, &[rec("o", 0, 3), rec("o", 1, 2)])? == 0, || "dataset must beat rotated".into())?;
    // human target vs rotated.
    ensure(best(&cs, &[rec("o", 3, 0), rec("o", 1, 2)])? == 3, || "human target must beat rotated".into())?;
    // stop is annotator-suggested.
    ensure(best(&stop, &[rec("s", 3, 0), rec("s", 1, 2)])? == 3, || "stop must beat rotated".into())?;
    // clear winner ignores priority.
    ensure(best(&cs, &[rec("o", 1, 0), rec("o", 1, 2), rec("o", 1, 3)])? == 1, || "outright winner".into())?;

    let tie = [rec("o", 1, 0), rec("o", 2, 3)];
    let first = aggregate_seeded(&cs, tie.iter(), 42).map_err(|e| e.to_string())?;
    ensure(first == 1 || first == 2, || format!("fallback picked {first}"))?;
    for _ in 0..TIE_RERUNS {
        let again = aggregate_seeded(&cs, tie.iter(), 42).map_err(|e| e.to_string())?;
        ensure(again == first, || "fallback differs between reruns".into())?;
    }
    Ok(format!("priority ties exact, rotated tie -> {first} on {TIE_RERUNS}/{TIE_RERUNS} reruns"))
}

fn open_world() -> World {
    World::empty(Bounds {
        min: (-20.0, -20.0),
        max: (20.0, 20.0),
    })
}

fn corridor(blocked: bool) -> Scenario {
    let mut world = World::empty(Bounds {
        min: (-1.0, -2.0),
        max: (10.0, 2.0),
    });
    world.static_segments.push(Segment { a: (-1.0, 0.8), b: (10.0, 0.8) });
    world.static_segments.push(Segment { a: (-1.0, -0.8), b: (10.0, -0.8) });
    if blocked {
        world.static_segments.push(Segment { a: (3.0, -0.8), b: (3.0, 0.8) });
    }
    Scenario {
        id: ScenarioId::GlassCorridor,
        world,
        start: Pose2::identity(),
        goal: (8.0, 0.0),
    }
}

/// Eight waypoints 0.25 m apart toward the goal.
fn toward_goal(frame: &SensorFrame) -> Option<Trajectory<f64>> {
    let (gx, gy) = frame.goal;
    let d = gx.hypot(gy);
    if d < 1e-6 {
        return None;
    }
    let pts: Vec<_> = (1..=8).map(|k| (gx / d * 0.25 * k as f64, gy / d * 0.25 * k as f64)).collect();
    Trajectory::from_positions(&pts, FrameTag::EgoStart).ok()
}

fn c5_metrics() -> Outcome {
    let cfg = MetricConfig {
        interp_step: INTERP_STEP,
        ..MetricConfig::default()
    };
    let lidar = LidarConfig {
        n_beams: 1440,
        fov: 2.0 * PI,
        max_range: 10.0,
    };
    // Obstacle 0.7 m off the middle of a straight 2 m path.
    let perp = min_clearance(&straight(8, 0.25), &ObstacleCloud::new(vec![(1.03, 0.7)]), &cfg);
    let mut wall = open_world();
    wall.static_segments.push(Segment { a: (3.0, -5.0), b: (3.0, 5.0) });
    let wall_c = min_clearance(
        &straight(8, 0.15),
        &scan_to_points(&cast_scan(&wall, &Pose2::identity(), &lidar, 0.0)),
        &cfg,
    );
    let mut disc = open_world();
    disc.static_circles.push(Circle {
        center: (2.0, 1.0),
        radius: 0.4,
    });
    let disc_c = min_clearance(
        &straight(8, 0.25),
        &scan_to_points(&cast_scan(&disc, &Pose2::identity(), &lidar, 0.0)),
        &cfg,
    );
    for (name, got, want) in [("perpendicular", perp, 0.7), ("wall", wall_c, 1.8), ("circle", disc_c, 0.6)] {
        ensure((got - want).abs() <= CLEARANCE_TOL, || format!("{name}: {got} vs {want}"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_dev: f64 = 0.0;
    for _ in 0..1000 {
        let a = random_forward_path(&mut rng, 8);
        let (dx, dy) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let pts: Vec<_> = a.positions().iter().map(|p| (p.0 + dx, p.1 + dy)).collect();
        let b = Trajectory::from_positions(&pts, FrameTag::EgoStart).unwrap();
        let d = deviation(&a, &b).map_err(|e| e.to_string())?;
        worst_dev = worst_dev.max((d - dx.hypot(dy)).abs());
    }
    ensure(worst_dev <= OFFSET_TOL, || format!("constant offset error {worst_dev:e}"))?;

    ensure(path_completion(5.0, 5.0, false, true) < 1.0, || "collided run at full progress".into())?;
    let sc = corridor(true);
    let log = run_episode(&sc, sc.start, &toward_goal, "straight", 0, &EpisodeConfig::default());
    ensure(log.summary.static_collision, || "blocked corridor run did not collide".into())?;
    ensure(log.summary.path_completion < 1.0, || format!("completion {}", log.summary.path_completion))?;
    Ok(format!(
        "clearance {perp:.3}/{wall_c:.3}/{disc_c:.3} vs 0.7/1.8/0.6, offset error {worst_dev:.1e}, collided completion {:.3}",
        log.summary.path_completion
    ))
}

fn fd_worst(kind: LossKind, seed: u64) -> Result<f64, String> {
    const N_IN: usize = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = PolicyParams::<f64>::init(N_IN, 16, 8, 3.0, 1.0, &mut rng);
    let data: Vec<TrainingPair<f64>> = (0..FD_SAMPLES)
        .map(|k| {
            let dataset = random_forward_path(&mut rng, 8);
            let (target, target_kind) = match kind {
                LossKind::Bc => (dataset, CandidateKind::Dataset),
                LossKind::Chop => (
                    rotate_trajectory(&dataset, rng.random_range(-0.8..0.8)).unwrap(),
                    CandidateKind::RotatedCcw,
                ),
            };
            TrainingPair {
                observation_id: format!("s{k}"),
                features: FeatureVec {
                    values: (0..N_IN).map(|_| rng.random_range(0.0..1.0)).collect(),
                },
                target,
                target_kind,
            }
        })
        .collect();
    let refs: Vec<_> = data.iter().collect();
    let analytic = grad(&params, &refs, kind).map_err(|e| e.to_string())?;
    let batch = |p: &PolicyParams<f64>| {
        data.iter().map(|s| loss(p, &s.features, &s.target, kind).unwrap()).sum::<f64>() / data.len() as f64
    };
    let mut worst: f64 = 0.0;
    for _ in 0..FD_COORDS {
        let k = rng.random_range(0..params.theta.len());
        let mut plus = params.clone();
        plus.theta[k] += FD_STEP;
        let mut minus = params.clone();
        minus.theta[k] -= FD_STEP;
        let numeric = (batch(&plus) - batch(&minus)) / (2.0 * FD_STEP);
        let rel = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(FD_REL_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn c6_gradients() -> Outcome {
    let bc = fd_worst(LossKind::Bc, 6)?;
    let chop = fd_worst(LossKind::Chop, 6)?;
    ensure(bc <= FD_MAX_REL && chop <= FD_MAX_REL, || format!("bc {bc:e}, chop {chop:e}"))?;
    Ok(format!("max relative error bc {bc:.1e}, chop {chop:.1e}"))
}

#[derive(Default)]
struct Side {
    near_collisions: usize,
    clearance: Vec<f64>,
    deviation: Vec<f64>,
    successes: usize,
    collisions: usize,
    episodes: usize,
}

struct Bench {
    bc: Side,
    chop: Side,
    observations: Vec<usize>,
    not_dataset: Vec<f64>,
    sigma_omega: f64,
    logs: Vec<EpisodeLog>,
    reproducible: bool,
    secs: f64,
}

fn run_bench() -> Result<Bench, String> {
    let t0 = Instant::now();
    let mut bench = Bench {
        bc: Side::default(),
        chop: Side::default(),
        observations: Vec::new(),
        not_dataset: Vec::new(),
        sigma_omega: RunConfig::default().teleop.sigma_omega,
        logs: Vec::new(),
        reproducible: true,
        secs: 0.0,
    };
    for seed in BENCH_SEEDS {
        let cfg = RunConfig {
            seed,
            episodes: SIM_EPISODES,
            ..RunConfig::default()
        };
        let data = generate_data(&cfg).map_err(|e| e.to_string())?;
        let (sets, records) = auto_annotate_all(&data.demonstrations, &cfg).map_err(|e| e.to_string())?;
        let prefs = preference_dataset(&sets, records);
        let summary = summarize(&prefs, seed).map_err(|e| e.to_string())?;
        bench.observations.push(summary.observations);
        bench.not_dataset.push(summary.fraction_dataset_not_preferred);
        let (train, test) = split(&data.demonstrations, seed, cfg.test_fraction);
        let scenarios = cfg.scenario_ids().map_err(|e| e.to_string())?;
        for kind in [LossKind::Bc, LossKind::Chop] {
            let out = train_policy(&train, &prefs, kind, &cfg).map_err(|e| e.to_string())?;
            let report = evaluate_offline(&out.params, &test, &prefs, &cfg).map_err(|e| e.to_string())?;
            let policy = network_policy(out.params, &cfg);
            let logs = simulate(&policy, kind.as_str(), &scenarios, &cfg);
            if seed == BENCH_SEEDS[0] {
                let again = simulate(&policy, kind.as_str(), &scenarios, &cfg);
                let a = serde_json::to_string(&logs).map_err(|e| e.to_string())?;
                let b = serde_json::to_string(&again).map_err(|e| e.to_string())?;
                bench.reproducible &= a == b;
            }
            let side = match kind {
                LossKind::Bc => &mut bench.bc,
                LossKind::Chop => &mut bench.chop,
            };
            side.near_collisions += report.near_collision_count;
            side.clearance.push(report.mean_min_clearance);
            side.deviation.push(report.mean_deviation);
            side.episodes += logs.len();
            side.successes += logs.iter().filter(|l| l.summary.reached_goal).count();
            side.collisions += logs
                .iter()
                .map(|l| l.summary.collisions + usize::from(l.summary.static_collision))
                .sum::<usize>();
            bench.logs.extend(logs);
        }
    }
    bench.secs = t0.elapsed().as_secs_f64();
    Ok(bench)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn c7_benchmark(b: &Bench) -> Outcome {
    let min_obs = *b.observations.iter().min().unwrap_or(&0);
    ensure(min_obs >= BENCH_MIN_OBSERVATIONS, || format!("only {min_obs} observations"))?;
    let reduction = 1.0 - b.chop.near_collisions as f64 / b.bc.near_collisions.max(1) as f64;
    let (clr_bc, clr_chop) = (mean(&b.bc.clearance), mean(&b.chop.clearance));
    let (dev_bc, dev_chop) = (mean(&b.bc.deviation), mean(&b.chop.deviation));
    let detail = format!(
        "{} seeds x {min_obs}+ obs in {:.0}s: near-collisions {} vs {} ({:+.1}%), clearance {clr_chop:.3} vs {clr_bc:.3}, \
         deviation {dev_chop:.3} vs {dev_bc:.3}, success {}/{} vs {}/{}, collisions {} vs {}",
        BENCH_SEEDS.len(),
        b.secs,
        b.chop.near_collisions,
        b.bc.near_collisions,
        -100.0 * reduction,
        b.chop.successes,
        b.chop.episodes,
        b.bc.successes,
        b.bc.episodes,
        b.chop.collisions,
        b.bc.collisions,
    );
    let checks = [
        ("(a) near-collision reduction", reduction >= NEAR_COLLISION_REDUCTION),
        ("(b) clearance", clr_chop > clr_bc),
        ("(c) deviation", dev_chop < dev_bc),
        ("(d) success", b.chop.successes >= b.bc.successes),
        ("(d) collisions", b.chop.collisions <= b.bc.collisions),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    if failed.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{} failed; {detail}", failed.join(", ")))
    }
}

fn c8_stop() -> Outcome {
    let mut w = open_world();
    let (a, b, c, d) = ((-0.4, -0.4), (0.4, -0.4), (0.4, 0.4), (-0.4, 0.4));
    for (p, q) in [(a, b), (b, c), (c, d), (d, a)] {
        w.static_segments.push(Segment { a: p, b: q });
    }
    let oracle = OracleConfig::default();
    let pose = Pose2::identity();
    let goal = (3.0, 0.0);
    let path = straight(8, 0.25);
    let input = oracle_target(&path, &w, &pose, goal, 0.0, &oracle, &TargetProviderConfig::default());
    ensure(input == AnnotatorInput::Stop, || format!("target provider gave {input:?}"))?;
    let cs = generate_for_observation("box", &path, input, &GenConfig::default()).map_err(|e| e.to_string())?;
    let recs = auto_annotate(&cs, &w, &pose, goal, 0.0, &oracle, "oracle");
    let stop = (0..cs.len()).find(|&k| cs.kind(k) == Some(CandidateKind::Stop)).ok_or("no stop candidate")?;
    for r in recs.iter().filter(|r| r.i == stop || r.j == stop) {
        let stop_won = (r.i == stop) == r.preferred_i;
        ensure(stop_won, || format!("stop lost pair ({}, {})", r.i, r.j))?;
    }
    let best = aggregate_seeded(&cs, recs.iter(), 0).map_err(|e| e.to_string())?;
    ensure(best == stop, || format!("tau* is candidate {best}"))?;
    Ok(format!("stop wins 3/3 pairs and is tau* (index {stop})"))
}

fn c9_executor(b: &Bench) -> Outcome {
    let mut ticks = 0usize;
    let mut violations = 0usize;
    for log in &b.logs {
        let r = log.header.config.prune_radius;
        for row in &log.rows {
            let Some(t) = row.target else { continue };
            ticks += 1;
            let [x, y, th] = row.pose;
            let (dx, dy) = (t[0] - x, t[1] - y);
            let ahead = th.cos() * dx + th.sin() * dy;
            if ahead < 0.0 || dx.hypot(dy) < r {
                violations += 1;
            }
        }
    }
    ensure(ticks > 0, || "no published targets in the logs".into())?;
    ensure(violations == 0, || format!("{violations} of {ticks} targets behind or inside prune radius"))?;

    let sc = corridor(false);
    let base = EpisodeConfig::default();
    let cfg = EpisodeConfig {
        runner_latency: 2.0 * base.runner_period,
        ..base
    };
    let log = run_episode(&sc, sc.start, &toward_goal, "straight", 0, &cfg);
    ensure(log.summary.reached_goal && cfg.goal_tolerance == 0.2, || format!("latency run: {:?}", log.summary))?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for seq in 1..=FRAME_CASES as u64 {
        let mgr = PathManager::new();
        let start = Pose2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-PI..PI));
        let pts: Vec<_> = (0..8).map(|_| (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))).collect();
        let msg = PathMsg {
            waypoints: Trajectory::from_positions(&pts, FrameTag::EgoStart).unwrap(),
            start_pose: start,
            stamp: 0.0,
            seq,
        };
        accept_new_path(&mgr, &msg).map_err(|e| e.to_string())?;
        for (w, p) in mgr.active().remaining.iter().zip(&pts) {
            let ex = start.x + start.theta.cos() * p.0 - start.theta.sin() * p.1;
            let ey = start.y + start.theta.sin() * p.0 + start.theta.cos() * p.1;
            worst = worst.max((w.x - ex).abs()).max((w.y - ey).abs());
        }
    }
    ensure(worst <= FRAME_TOL, || format!("frame mapping error {worst:e}"))?;
    ensure(b.reproducible, || "repeated fixed-seed episodes differ".into())?;
    Ok(format!(
        "0/{ticks} target violations over {} episodes, 2x latency corridor reached goal in {} ticks, frame error {worst:.1e}, episodes bit-identical",
        b.logs.len(),
        log.summary.steps
    ))
}

fn c10_not_dataset(b: &Bench) -> Outcome {
    ensure(b.sigma_omega >= MIN_SIGMA_OMEGA, || format!("sigma_omega {}", b.sigma_omega))?;
    let lowest = b.not_dataset.iter().copied().fold(f64::INFINITY, f64::min);
    let all: Vec<String> = b.not_dataset.iter().map(|f| format!("{f:.3}")).collect();
    ensure(lowest > NOT_DATASET_MAJORITY, || format!("fractions {}", all.join(", ")))?;
    Ok(format!("sigma_omega {}, dataset not preferred on {} of observations", b.sigma_omega, all.join("/")))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(e) => Err(format!(
            "panicked: {}",
            e.downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        )),
    }
}

fn main() -> ExitCode {
    let t0 = Instant::now();
    let mut results: Vec<(u8, &str, Outcome)> = vec![
        (1, "combinatorics", guarded(c1_combinatorics)),
        (2, "shape preservation", guarded(c2_shape)),
        (3, "bradley-terry recovery", guarded(c3_bradley_terry)),
        (4, "aggregation ties", guarded(c4_aggregation)),
        (5, "metric oracles", guarded(c5_metrics)),
        (6, "gradients", guarded(c6_gradients)),
    ];
    let bench = catch_unwind(run_bench).unwrap_or_else(|_| Err("benchmark panicked".into()));
    let with_bench = |f: fn(&Bench) -> Outcome| match &bench {
        Ok(b) => guarded(|| f(b)),
        Err(e) => Err(format!("benchmark failed: {e}")),
    };
    results.push((7, "chop vs bc benchmark", with_bench(c7_benchmark)));
    results.push((8, "oracle stop", guarded(c8_stop)));
    results.push((9, "executor invariants", with_bench(c9_executor)));
    results.push((10, "dataset not preferred", with_bench(c10_not_dataset)));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (n, name, r) in &results {
        match r {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {detail}");
            }
        }
    }
    println!("{} passed, {failed} failed in {:.0}s", results.len() - failed, t0.elapsed().as_secs_f64());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
