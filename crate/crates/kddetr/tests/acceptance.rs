//! End-to-end acceptance gate. One test, ten numbered checks, each printing
//! a single [PASS]/[FAIL] line with the measured numbers behind the verdict.
//!
//! The trend checks (5 through 8) train dozens of small students against a
//! shared teacher, so the whole suite runs for roughly an hour and a half
//! on one core. Lines are written straight to the process stdout so they
//! appear even under the harness capture; cheap checks run first so a late
//! failure still leaves the early verdicts visible.
//!
//! Two of the trend orderings are known not to hold at this scale and their
//! checks fail while printing the measured means: index-paired imitation
//! sits above the no-distillation baseline instead of below it (check 5),
//! and teacher-query probes alone beat the combined probe set (check 6).
//! The README's acceptance section explains the mechanism behind both. The
//! checks stay strict instead of being loosened to match the small models.

use std::io::Write as _;
use std::time::Instant;

use kddetr::boxes::{giou, iou, BoxXYXY};
use kddetr::gradcheck;
use kddetr::harness::{
    distill, run_ablation, train_student_baseline, train_teacher, Checkpoint, Metrics, RunConfig,
    Suite,
};
use kddetr::matching::{hungarian, CostMatrix};
use kddetr::model::ModelConfig;
use kddetr::points::Strategy;
use kddetr::rng::Rng;

/// Finite-difference suite must clear its own per-case tolerances this fast.
const GRADCHECK_BUDGET_S: f64 = 60.0;
const GRADCHECK_SEEDS: u64 = 20;

/// Assignment oracle: matrices checked and the time allowed for all of them.
const MATCHING_CASES: usize = 1000;
const MATCHING_BUDGET_S: f64 = 10.0;

/// Overlap oracle tolerances: exact closed forms to 1e-9, the 512x512
/// grid-sampling estimate to a hundredth.
const HAND_TOL: f64 = 1e-9;
const GRID_TOL: f64 = 0.01;
const GRID_PAIRS: usize = 100;
const GRID_RES: usize = 512;

/// Trend margins, in mean-AP units over three seeds.
const SIMILAR_GENERAL_MARGIN: f64 = 0.01;
const COMBINED_MARGIN: f64 = 0.02;
const TREND_SEEDS: [u64; 3] = [1, 2, 3];
const PAIRING_SUITE_BUDGET_S: f64 = 7200.0;

/// First default-config teacher run measured 0.22 mean AP on the 500-scene
/// validation split; the floor sits under that with room for evaluation
/// noise while still catching a silently broken model.
const TEACHER_FLOOR: f64 = 0.18;
const TEACHER_BUDGET_S: f64 = 900.0;

struct Gate {
    failures: Vec<String>,
}

impl Gate {
    fn new() -> Self {
        Gate {
            failures: Vec::new(),
        }
    }

    fn report(&mut self, number: usize, name: &str, pass: bool, detail: String) {
        let tag = if pass { "PASS" } else { "FAIL" };
        let line = format!("[{tag}] check {number:2} {name}: {detail}");
        let mut out = std::io::stdout();
        writeln!(out, "{line}").ok();
        out.flush().ok();
        if !pass {
            self.failures.push(line);
        }
    }
}

/// The model pair every trend check trains: a 32-wide teacher two blocks
/// deep against a student with half the depth and feed-forward width.
/// Small enough that a 4000-step distillation fits in about a minute.
fn trend_config() -> RunConfig {
    let teacher = ModelConfig {
        image_size: 32,
        patch_size: 8,
        hidden_dim: 32,
        num_heads: 4,
        encoder_layers: 2,
        decoder_layers: 2,
        ffn_dim: 64,
        num_queries: 10,
        num_classes: 3,
    };
    let student = ModelConfig {
        encoder_layers: 1,
        decoder_layers: 1,
        ffn_dim: 32,
        ..teacher
    };
    RunConfig {
        teacher,
        student,
        ..RunConfig::default()
    }
}

fn check_gradients(gate: &mut Gate) {
    let start = Instant::now();
    let outcome = gradcheck::run_suite(GRADCHECK_SEEDS);
    let elapsed = start.elapsed().as_secs_f64();
    match outcome {
        Ok(report) => {
            let pass = report.all_passed() && elapsed < GRADCHECK_BUDGET_S;
            gate.report(
                1,
                "gradient-checks",
                pass,
                format!(
                    "{} cases x {} seeds, worst rel err {:.2e}, {:.1}s (budget {:.0}s)",
                    report.cases.len(),
                    report.seeds,
                    report.worst(),
                    elapsed,
                    GRADCHECK_BUDGET_S
                ),
            );
        }
        Err(e) => gate.report(1, "gradient-checks", false, format!("suite error: {e}")),
    }
}

/// Minimum assignment cost by exhaustive search over injections of columns
/// into rows. Integer-valued costs keep every sum exact in 64-bit floats,
/// so the comparison below can demand bitwise equality.
fn brute_force_min(c: &CostMatrix) -> f64 {
    fn recurse(c: &CostMatrix, col: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if col == c.cols() {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        for row in 0..c.rows() {
            if !used[row] {
                used[row] = true;
                recurse(c, col + 1, used, acc + c.at(row, col), best);
                used[row] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    recurse(c, 0, &mut vec![false; c.rows()], 0.0, &mut best);
    best
}

fn check_assignment(gate: &mut Gate) {
    let start = Instant::now();
    let mut rng = Rng::seeded(0x6d617463);
    let mut mismatches = 0usize;
    for _ in 0..MATCHING_CASES {
        let rows = 1 + rng.below(7) as usize;
        let cols = 1 + rng.below(rows as u64) as usize;
        let costs: Vec<f64> = (0..rows * cols).map(|_| rng.below(1000) as f64).collect();
        let matrix = CostMatrix::new(rows, cols, costs).expect("finite costs");
        let solved = hungarian(&matrix).expect("solvable");
        if solved.total_cost != brute_force_min(&matrix) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = mismatches == 0 && elapsed < MATCHING_BUDGET_S;
    gate.report(
        2,
        "assignment-oracle",
        pass,
        format!(
            "{MATCHING_CASES} matrices up to 7x7, {mismatches} cost mismatches, {elapsed:.1}s \
             (budget {MATCHING_BUDGET_S:.0}s)"
        ),
    );
}

/// Overlap ratios estimated by membership counts over grid cell centers.
/// Returns (iou, giou). Deliberately simple; it shares no arithmetic with
/// the closed-form implementation it cross-checks.
fn grid_overlap(a: BoxXYXY, b: BoxXYXY) -> (f64, f64) {
    let inside =
        |bx: &BoxXYXY, x: f64, y: f64| x >= bx.x1 && x <= bx.x2 && y >= bx.y1 && y <= bx.y2;
    let hull = BoxXYXY {
        x1: a.x1.min(b.x1),
        y1: a.y1.min(b.y1),
        x2: a.x2.max(b.x2),
        y2: a.y2.max(b.y2),
    };
    let (mut both, mut either, mut hull_n) = (0u64, 0u64, 0u64);
    for i in 0..GRID_RES {
        for j in 0..GRID_RES {
            let x = (i as f64 + 0.5) / GRID_RES as f64;
            let y = (j as f64 + 0.5) / GRID_RES as f64;
            let (in_a, in_b) = (inside(&a, x, y), inside(&b, x, y));
            if in_a && in_b {
                both += 1;
            }
            if in_a || in_b {
                either += 1;
            }
            if inside(&hull, x, y) {
                hull_n += 1;
            }
        }
    }
    let iou = both as f64 / either as f64;
    (iou, iou - (hull_n - either) as f64 / hull_n as f64)
}

fn check_overlap(gate: &mut Gate) {
    let unit = |x1, y1, x2, y2| BoxXYXY { x1, y1, x2, y2 };
    let hand = [
        // disjoint, hull three times the union
        (unit(0.0, 0.0, 1.0, 1.0), unit(2.0, 0.0, 3.0, 1.0), 0.0, -1.0 / 3.0),
        // quarter overlap of two 2x2 squares
        (unit(0.0, 0.0, 2.0, 2.0), unit(1.0, 1.0, 3.0, 3.0), 1.0 / 7.0, -5.0 / 63.0),
        (unit(0.2, 0.3, 0.6, 0.9), unit(0.2, 0.3, 0.6, 0.9), 1.0, 1.0),
    ];
    let mut worst_hand = 0.0f64;
    for &(a, b, want_iou, want_giou) in &hand {
        worst_hand = worst_hand
            .max((iou(a, b) - want_iou).abs())
            .max((giou(a, b) - want_giou).abs());
    }

    let mut rng = Rng::seeded(0x67656f6d);
    let mut worst_grid = 0.0f64;
    for _ in 0..GRID_PAIRS {
        let sample = |rng: &mut Rng| {
            let w = rng.uniform(0.1, 0.5);
            let h = rng.uniform(0.1, 0.5);
            let cx = rng.uniform(w / 2.0, 1.0 - w / 2.0);
            let cy = rng.uniform(h / 2.0, 1.0 - h / 2.0);
            BoxXYXY {
                x1: cx - w / 2.0,
                y1: cy - h / 2.0,
                x2: cx + w / 2.0,
                y2: cy + h / 2.0,
            }
        };
        let (a, b) = (sample(&mut rng), sample(&mut rng));
        let (grid_iou, grid_giou) = grid_overlap(a, b);
        worst_grid = worst_grid
            .max((iou(a, b) - grid_iou).abs())
            .max((giou(a, b) - grid_giou).abs());
    }

    let pass = worst_hand < HAND_TOL && worst_grid < GRID_TOL;
    gate.report(
        3,
        "overlap-oracle",
        pass,
        format!(
            "hand cases off by {worst_hand:.2e} (limit {HAND_TOL:.0e}), \
             {GRID_PAIRS} grid pairs off by {worst_grid:.4} (limit {GRID_TOL})"
        ),
    );
}

fn check_consistency(gate: &mut Gate, cfg: &RunConfig, teacher: &Checkpoint) {
    let run = RunConfig {
        strategy: Strategy::Combined,
        use_fgw: true,
        seed: TREND_SEEDS[0],
        ..cfg.clone()
    };
    // Every scene of every step hashes the point tensors fed to both models,
    // checks teacher parameter bytes at the end, and fails the run on any
    // gradient reaching the frozen points. Completing the run is the check.
    let expected = (run.student_steps * run.batch_size) as u64;
    match distill(&run, teacher) {
        Ok(ckpt) => {
            let checks = ckpt.metrics.point_hash_checks;
            let pass = checks == expected;
            gate.report(
                4,
                "shared-point-consistency",
                pass,
                format!(
                    "{} steps assert-clean, {checks} point-hash checks (expected {expected}), \
                     teacher bytes verified unchanged",
                    run.student_steps
                ),
            );
        }
        Err(e) => gate.report(
            4,
            "shared-point-consistency",
            false,
            format!("distillation aborted: {e}"),
        ),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Trains one student per seed for a pairing baseline (or, with `None`,
/// the plain detection-only student) and returns each run's metrics.
fn pairing_cells(
    cfg: &RunConfig,
    strategy: Option<Strategy>,
    teacher: &Checkpoint,
) -> Result<Vec<Metrics>, kddetr::Error> {
    TREND_SEEDS
        .iter()
        .map(|&seed| {
            let run = RunConfig {
                seed,
                strategy: strategy.unwrap_or(Strategy::Combined),
                ..cfg.clone()
            };
            let ckpt = match strategy {
                None => train_student_baseline(&run)?,
                Some(_) => distill(&run, teacher)?,
            };
            Ok(ckpt.metrics)
        })
        .collect()
}

fn retained(metrics: &[Metrics]) -> Vec<f64> {
    metrics.iter().map(|m| m.best_map).collect()
}

/// Checks 5 and 9 share the baseline cells: 9 re-runs the first baseline
/// seed and demands an identical metrics record, byte for byte as JSON.
fn check_pairing_trend_and_determinism(gate: &mut Gate, cfg: &RunConfig, teacher: &Checkpoint) {
    let start = Instant::now();
    let outcome = (|| {
        let base = pairing_cells(cfg, None, teacher)?;
        let inc = pairing_cells(cfg, Some(Strategy::Inconsistent), teacher)?;
        let fg = pairing_cells(cfg, Some(Strategy::SimilarForeground), teacher)?;
        let gen = pairing_cells(cfg, Some(Strategy::SimilarGeneral), teacher)?;
        Ok::<_, kddetr::Error>((base, inc, fg, gen))
    })();
    let elapsed = start.elapsed().as_secs_f64();
    match outcome {
        Ok((base, inc, fg, gen)) => {
            let (b, i, f, g) = (
                mean(&retained(&base)),
                mean(&retained(&inc)),
                mean(&retained(&fg)),
                mean(&retained(&gen)),
            );
            let ordered = i <= b && b < f && f <= g;
            let margin = g >= b + SIMILAR_GENERAL_MARGIN;
            let pass = ordered && margin && elapsed < PAIRING_SUITE_BUDGET_S;
            gate.report(
                5,
                "pairing-strategies-trend",
                pass,
                format!(
                    "mean AP over seeds {TREND_SEEDS:?}: index-paired {i:.4}, none {b:.4}, \
                     matched {f:.4}, matched+negatives {g:.4} \
                     (need index-paired <= none < matched <= matched+negatives, \
                     last >= none+{SIMILAR_GENERAL_MARGIN}), {elapsed:.0}s"
                ),
            );

            let rerun = RunConfig {
                seed: TREND_SEEDS[0],
                ..cfg.clone()
            };
            let reference = serde_json::to_string(&base[0]).expect("metrics serialize");
            match train_student_baseline(&rerun) {
                Ok(ckpt) => {
                    let again = serde_json::to_string(&ckpt.metrics).expect("metrics serialize");
                    let pass = again == reference;
                    gate.report(
                        9,
                        "determinism",
                        pass,
                        format!(
                            "first trend cell re-run with its config and seed: \
                             metrics JSON identical ({} bytes), retained AP {:.4}",
                            again.len(),
                            ckpt.metrics.best_map
                        ),
                    );
                }
                Err(e) => gate.report(9, "determinism", false, format!("rerun failed: {e}")),
            }
        }
        Err(e) => {
            gate.report(5, "pairing-strategies-trend", false, format!("cell failed: {e}"));
            gate.report(9, "determinism", false, "skipped: pairing cells failed".into());
        }
    }
}

fn summary_map(results: &kddetr::harness::AblationResults) -> std::collections::BTreeMap<String, f64> {
    results
        .summary
        .iter()
        .map(|(name, mean, _)| (name.clone(), *mean))
        .collect()
}

fn check_sampling_strategies(gate: &mut Gate, cfg: &RunConfig, teacher: &Checkpoint) {
    match run_ablation(Suite::Strategies, cfg, &TREND_SEEDS, teacher) {
        Ok(results) => {
            let m = summary_map(&results);
            let get = |k: &str| m.get(k).copied().unwrap_or(f64::NAN);
            let (none, gen, gen_f, spec, spec_f, comb) = (
                get("none"),
                get("general"),
                get("general_fgw"),
                get("specific"),
                get("specific_fgw"),
                get("combined_fgw"),
            );
            let pass = comb >= gen
                && comb >= gen_f
                && comb >= spec
                && comb >= spec_f
                && gen_f >= gen
                && comb >= none + COMBINED_MARGIN;
            gate.report(
                6,
                "sampling-strategies-trend",
                pass,
                format!(
                    "mean AP: none {none:.4}, general {gen:.4}/{gen_f:.4} (plain/weighted), \
                     specific {spec:.4}/{spec_f:.4}, combined {comb:.4} \
                     (need combined >= each, weighted-general >= general, \
                     combined >= none+{COMBINED_MARGIN})"
                ),
            );
        }
        Err(e) => gate.report(6, "sampling-strategies-trend", false, format!("suite failed: {e}")),
    }
}

fn check_query_control(gate: &mut Gate, cfg: &RunConfig, teacher: &Checkpoint) {
    match run_ablation(Suite::QueryControl, cfg, &TREND_SEEDS, teacher) {
        Ok(results) => {
            let m = summary_map(&results);
            let get = |k: &str| m.get(k).copied().unwrap_or(f64::NAN);
            let (plain, extra, points) = (get("plain"), get("extra_queries"), get("distill_points"));
            let pass = extra - plain < points - plain;
            gate.report(
                7,
                "extra-query-control",
                pass,
                format!(
                    "mean AP: plain {plain:.4}, +{} plain queries {extra:.4} (gain {:+.4}), \
                     same count of distillation points {points:.4} (gain {:+.4})",
                    cfg.general_points + cfg.teacher.num_queries,
                    extra - plain,
                    points - plain
                ),
            );
        }
        Err(e) => gate.report(7, "extra-query-control", false, format!("suite failed: {e}")),
    }
}

fn check_point_count_saturation(gate: &mut Gate, cfg: &RunConfig, teacher: &Checkpoint) {
    const COUNTS: [usize; 5] = [2, 5, 10, 20, 60];
    match run_ablation(Suite::PointCounts, cfg, &TREND_SEEDS, teacher) {
        Ok(results) => {
            let mut saturated = 0usize;
            let mut per_seed = String::new();
            for &seed in &TREND_SEEDS {
                let best = COUNTS
                    .iter()
                    .filter_map(|&c| {
                        results
                            .rows
                            .iter()
                            .find(|r| r.seed == seed && r.variant == format!("general_{c}"))
                            .filter(|r| r.map.is_finite())
                            .map(|r| (c, r.map))
                    })
                    .max_by(|a, b| a.1.total_cmp(&b.1));
                if let Some((count, map)) = best {
                    if count != *COUNTS.last().unwrap() {
                        saturated += 1;
                    }
                    per_seed.push_str(&format!(" seed{seed}: best {count} ({map:.4})"));
                } else {
                    per_seed.push_str(&format!(" seed{seed}: no finite cells"));
                }
            }
            let pass = saturated >= 2;
            gate.report(
                8,
                "point-count-saturation",
                pass,
                format!(
                    "best point count below the top of {COUNTS:?} in {saturated}/3 seeds \
                     (need >=2):{per_seed}"
                ),
            );
        }
        Err(e) => gate.report(8, "point-count-saturation", false, format!("suite failed: {e}")),
    }
}

fn check_teacher_viability(gate: &mut Gate) {
    let cfg = RunConfig::default();
    let start = Instant::now();
    match train_teacher(&cfg) {
        Ok(ckpt) => {
            let elapsed = start.elapsed().as_secs_f64();
            let map = ckpt.metrics.best_map;
            let pass = map >= TEACHER_FLOOR && elapsed <= TEACHER_BUDGET_S;
            gate.report(
                10,
                "teacher-viability",
                pass,
                format!(
                    "default config reached {map:.4} mean AP (floor {TEACHER_FLOOR}) \
                     in {elapsed:.0}s (budget {TEACHER_BUDGET_S:.0}s)"
                ),
            );
        }
        Err(e) => gate.report(10, "teacher-viability", false, format!("training failed: {e}")),
    }
}

#[test]
fn acceptance() {
    let mut gate = Gate::new();

    check_gradients(&mut gate);
    check_assignment(&mut gate);
    check_overlap(&mut gate);

    let cfg = trend_config();
    let teacher = train_teacher(&cfg).expect("trend teacher trains");
    let mut out = std::io::stdout();
    writeln!(
        out,
        "       trend teacher ready: {:.4} mean AP at step {}",
        teacher.metrics.best_map,
        teacher.metrics.best_step
    )
    .ok();
    out.flush().ok();

    check_consistency(&mut gate, &cfg, &teacher);
    check_pairing_trend_and_determinism(&mut gate, &cfg, &teacher);
    check_sampling_strategies(&mut gate, &cfg, &teacher);
    check_query_control(&mut gate, &cfg, &teacher);
    check_point_count_saturation(&mut gate, &cfg, &teacher);
    check_teacher_viability(&mut gate);

    assert!(
        gate.failures.is_empty(),
        "{} of 10 checks failed:\n{}",
        gate.failures.len(),
        gate.failures.join("\n")
    );
}
