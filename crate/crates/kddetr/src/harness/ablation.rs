//! Ablation suites: batches of (variant, seed) training cells sharing one
//! teacher, reported as CSV with per-variant mean and spread rows.
//!
//! Cells are independent and may run in parallel; row order in the output is
//! fixed by the suite definition, so reruns produce the same table (wall
//! times aside).

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::{EvalPoint, RunConfig};
use crate::harness::train::{distill, train_student_baseline};
use crate::points::Strategy;

pub const CSV_HEADER: &str = "variant,seed,step,ap50,ap75,map,wall_seconds";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    /// Point sampling strategies against the no-distillation control.
    Strategies,
    /// Sweep over the number of general points.
    PointCounts,
    /// Extra plain object queries versus the same number of distillation
    /// points.
    QueryControl,
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strategies" => Ok(Suite::Strategies),
            "point_counts" => Ok(Suite::PointCounts),
            "query_control" => Ok(Suite::QueryControl),
            other => Err(Error::Param(format!(
                "unknown suite {other:?}; expected strategies, point_counts or query_control"
            ))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Strategies => "strategies",
            Suite::PointCounts => "point_counts",
            Suite::QueryControl => "query_control",
        })
    }
}

/// How a variant trains its student.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Regime {
    DetectionOnly,
    Distill,
}

#[derive(Clone, Debug)]
pub struct Variant {
    pub name: String,
    cfg: RunConfig,
    regime: Regime,
}

/// The distilled variants of the query-control suite use as many points as
/// the plain-query variant adds queries: the general points plus the
/// teacher's own query stack.
fn matched_point_count(base: &RunConfig) -> usize {
    base.general_points + base.teacher.num_queries
}

pub fn suite_variants(suite: Suite, base: &RunConfig) -> Vec<Variant> {
    let distilled = |name: &str, strategy: Strategy, use_fgw: bool| Variant {
        name: name.into(),
        cfg: RunConfig {
            strategy,
            use_fgw,
            ..base.clone()
        },
        regime: Regime::Distill,
    };
    match suite {
        Suite::Strategies => vec![
            Variant {
                name: "none".into(),
                cfg: base.clone(),
                regime: Regime::DetectionOnly,
            },
            distilled("general", Strategy::GeneralOnly, false),
            distilled("general_fgw", Strategy::GeneralOnly, true),
            distilled("specific", Strategy::SpecificOnly, false),
            distilled("specific_fgw", Strategy::SpecificOnly, true),
            distilled("combined_fgw", Strategy::Combined, true),
        ],
        Suite::PointCounts => [2usize, 5, 10, 20, 60]
            .into_iter()
            .map(|m| Variant {
                name: format!("general_{m}"),
                cfg: RunConfig {
                    strategy: Strategy::GeneralOnly,
                    use_fgw: true,
                    general_points: m,
                    ..base.clone()
                },
                regime: Regime::Distill,
            })
            .collect(),
        Suite::QueryControl => {
            let m = matched_point_count(base);
            vec![
                Variant {
                    name: "plain".into(),
                    cfg: base.clone(),
                    regime: Regime::DetectionOnly,
                },
                Variant {
                    name: "extra_queries".into(),
                    cfg: RunConfig {
                        extra_plain_queries: m,
                        ..base.clone()
                    },
                    regime: Regime::DetectionOnly,
                },
                Variant {
                    name: "distill_points".into(),
                    cfg: RunConfig {
                        strategy: Strategy::Combined,
                        use_fgw: true,
                        ..base.clone()
                    },
                    regime: Regime::Distill,
                },
            ]
        }
    }
}

/// One finished cell. Failed cells carry NaN metrics and the error text.
#[derive(Clone, Debug)]
pub struct CellRow {
    pub variant: String,
    pub seed: u64,
    pub step: usize,
    pub ap50: f64,
    pub ap75: f64,
    pub map: f64,
    pub wall_seconds: f64,
    pub error: Option<String>,
}

pub struct AblationResults {
    pub rows: Vec<CellRow>,
    /// Per-variant (name, mean map, spread) in suite order.
    pub summary: Vec<(String, f64, f64)>,
}

fn run_cell(variant: &Variant, seed: u64, teacher: &Checkpoint) -> Result<Checkpoint> {
    let cfg = RunConfig {
        seed,
        ..variant.cfg.clone()
    };
    match variant.regime {
        Regime::DetectionOnly => train_student_baseline(&cfg),
        Regime::Distill => distill(&cfg, teacher),
    }
}

/// Trains every variant at every seed. Cell failures become NaN rows; the
/// suite keeps going.
pub fn run_ablation(
    suite: Suite,
    base: &RunConfig,
    seeds: &[u64],
    teacher: &Checkpoint,
) -> Result<AblationResults> {
    base.validate()?;
    if seeds.is_empty() {
        return Err(Error::Param("at least one seed is required".into()));
    }
    let variants = suite_variants(suite, base);
    let cells: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();

    let rows: Vec<CellRow> = cells
        .par_iter()
        .map(|&(vi, seed)| {
            let variant = &variants[vi];
            let start = Instant::now();
            let outcome = run_cell(variant, seed, teacher);
            let wall = start.elapsed().as_secs_f64();
            match outcome {
                Ok(ckpt) => {
                    let m = &ckpt.metrics;
                    // All columns describe the retained (best-AP) checkpoint.
                    let at_best = m
                        .history
                        .iter()
                        .find(|p| p.step == m.best_step)
                        .cloned()
                        .unwrap_or(EvalPoint {
                            step: m.best_step,
                            map: m.best_map,
                            ap50: m.final_ap50,
                            ap75: m.final_ap75,
                        });
                    CellRow {
                        variant: variant.name.clone(),
                        seed,
                        step: m.best_step,
                        ap50: at_best.ap50,
                        ap75: at_best.ap75,
                        map: m.best_map,
                        wall_seconds: wall,
                        error: None,
                    }
                }
                Err(e) => {
                    eprintln!("[{}/{seed}] failed: {e}", variant.name);
                    CellRow {
                        variant: variant.name.clone(),
                        seed,
                        step: 0,
                        ap50: f64::NAN,
                        ap75: f64::NAN,
                        map: f64::NAN,
                        wall_seconds: wall,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();

    let summary = variants
        .iter()
        .map(|v| {
            let maps: Vec<f64> = rows
                .iter()
                .filter(|r| r.variant == v.name && r.map.is_finite())
                .map(|r| r.map)
                .collect();
            let (mean, std) = mean_std(&maps);
            (v.name.clone(), mean, std)
        })
        .collect();

    Ok(AblationResults { rows, summary })
}

/// Mean and population standard deviation; NaN when no cell survived.
fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl AblationResults {
    /// Data rows in suite order, then one mean and one std row per variant.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.3}\n",
                r.variant, r.seed, r.step, r.ap50, r.ap75, r.map, r.wall_seconds
            ));
        }
        for (name, mean, std) in &self.summary {
            out.push_str(&format!("{name},mean,,,,{mean:.6},\n"));
            out.push_str(&format!("{name},std,,,,{std:.6},\n"));
        }
        out
    }

    pub fn mean_map(&self, variant: &str) -> Option<f64> {
        self.summary
            .iter()
            .find(|(n, _, _)| n == variant)
            .map(|&(_, mean, _)| mean)
    }
}
