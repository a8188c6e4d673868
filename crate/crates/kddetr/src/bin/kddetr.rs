use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kddetr::data::{generate, read_dataset, write_dataset};
use kddetr::gradcheck;
use kddetr::harness::{
    distill, run_ablation, train_student_baseline, train_teacher, Checkpoint, Metrics, RunConfig,
    Suite, CSV_HEADER,
};

#[derive(Parser)]
#[command(name = "kddetr", about = "Set-prediction detector and distillation lab")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a dataset file of synthetic scenes.
    GenData {
        /// Destination file.
        #[arg(long)]
        file: PathBuf,
        /// Number of scenes; defaults to the config's validation size.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Trains the teacher with detection loss only.
    TrainTeacher,
    /// Trains a student from scratch without distillation.
    TrainStudent,
    /// Distills a trained teacher into a fresh student.
    Distill {
        /// Teacher checkpoint path.
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Evaluates a checkpoint on a dataset file.
    Eval {
        /// Checkpoint path.
        #[arg(long)]
        model: PathBuf,
        /// Dataset file written by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference gradient check over every op and both losses.
    Gradcheck {
        /// Random restarts per case.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Runs an ablation suite and writes its CSV.
    Ablate {
        /// One of: strategies, point_counts, query_control.
        #[arg(long)]
        suite: String,
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Teacher checkpoint; trained from the config when omitted.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
}

fn load_config(global: &Global) -> kddetr::error::Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(path) => RunConfig::from_json(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &global.out {
        cfg.out_dir = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn metrics_json(m: &Metrics) -> serde_json::Value {
    serde_json::json!({
        "steps": m.steps,
        "best_map": m.best_map,
        "best_step": m.best_step,
        "final_map": m.final_map,
        "final_ap50": m.final_ap50,
        "final_ap75": m.final_ap75,
        "final_detection_loss": m.final_detection_loss,
        "final_distill_loss": m.final_distill_loss,
        "point_hash_checks": m.point_hash_checks,
    })
}

fn save_checkpoint(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    file_name: &str,
) -> kddetr::error::Result<PathBuf> {
    let dir = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(dir)?;
    let path = dir.join(file_name);
    ckpt.save(&path)?;
    Ok(path)
}

fn run(cli: Cli) -> kddetr::error::Result<serde_json::Value> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::GenData { file, count } => {
            let count = count.unwrap_or(cfg.val_scenes);
            let samples = generate(cfg.seed, count, &cfg.scene)?;
            if let Some(parent) = file.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            write_dataset(&file, cfg.seed, &cfg.scene, &samples)?;
            Ok(serde_json::json!({
                "command": "gen-data",
                "file": file.display().to_string(),
                "scenes": count,
                "seed": cfg.seed,
            }))
        }
        Command::TrainTeacher => {
            let ckpt = train_teacher(&cfg)?;
            let path = save_checkpoint(&cfg, &ckpt, "teacher.kddt")?;
            Ok(serde_json::json!({
                "command": "train-teacher",
                "checkpoint": path.display().to_string(),
                "metrics": metrics_json(&ckpt.metrics),
            }))
        }
        Command::TrainStudent => {
            let ckpt = train_student_baseline(&cfg)?;
            let path = save_checkpoint(&cfg, &ckpt, "student_baseline.kddt")?;
            Ok(serde_json::json!({
                "command": "train-student",
                "checkpoint": path.display().to_string(),
                "metrics": metrics_json(&ckpt.metrics),
            }))
        }
        Command::Distill { teacher } => {
            let teacher_ckpt = Checkpoint::load(&teacher)?;
            let ckpt = distill(&cfg, &teacher_ckpt)?;
            let path = save_checkpoint(&cfg, &ckpt, "student.kddt")?;
            Ok(serde_json::json!({
                "command": "distill",
                "teacher": teacher.display().to_string(),
                "checkpoint": path.display().to_string(),
                "metrics": metrics_json(&ckpt.metrics),
            }))
        }
        Command::Eval { model, data } => {
            let ckpt = Checkpoint::load(&model)?;
            let net = ckpt.restore_model()?;
            let (_, samples) = read_dataset(&data)?;
            let report = kddetr::harness::evaluate(&net, &samples)?;
            Ok(serde_json::json!({
                "command": "eval",
                "model": model.display().to_string(),
                "scenes": samples.len(),
                "map": report.mean_ap,
                "ap50": report.ap50,
                "ap75": report.ap75,
            }))
        }
        Command::Gradcheck { seeds } => {
            let report = gradcheck::run_suite(seeds)?;
            for case in &report.cases {
                eprintln!(
                    "{} {}: worst rel err {:.3e} (tolerance {:.0e})",
                    if case.passed() { "pass" } else { "FAIL" },
                    case.name,
                    case.worst_rel_err,
                    case.tolerance,
                );
            }
            let value = serde_json::json!({
                "command": "gradcheck",
                "seeds": report.seeds,
                "passed": report.all_passed(),
                "cases": report.cases.iter().map(|c| serde_json::json!({
                    "name": c.name,
                    "worst_rel_err": c.worst_rel_err,
                    "tolerance": c.tolerance,
                    "passed": c.passed(),
                })).collect::<Vec<_>>(),
            });
            if !report.all_passed() {
                println!("{value}");
                return Err(kddetr::error::Error::Metric(
                    "gradient check failed".into(),
                ));
            }
            Ok(value)
        }
        Command::Ablate {
            suite,
            seeds,
            teacher,
        } => {
            let suite: Suite = suite.parse()?;
            let teacher_ckpt = match teacher {
                Some(path) => Checkpoint::load(path)?,
                None => {
                    eprintln!("no teacher checkpoint given, training one first");
                    let ckpt = train_teacher(&cfg)?;
                    save_checkpoint(&cfg, &ckpt, "teacher.kddt")?;
                    ckpt
                }
            };
            let results = run_ablation(suite, &cfg, &seeds, &teacher_ckpt)?;
            let dir = Path::new(&cfg.out_dir);
            std::fs::create_dir_all(dir)?;
            let csv_path = dir.join(format!("ablation_{suite}.csv"));
            std::fs::write(&csv_path, results.to_csv())?;
            eprintln!("{CSV_HEADER}");
            for (name, mean, std) in &results.summary {
                eprintln!("{name}: map {mean:.4} +/- {std:.4}");
            }
            let failures = results.rows.iter().filter(|r| r.error.is_some()).count();
            Ok(serde_json::json!({
                "command": "ablate",
                "suite": suite.to_string(),
                "csv": csv_path.display().to_string(),
                "rows": results.rows.len(),
                "failures": failures,
                "summary": results.summary.iter().map(|(name, mean, std)| {
                    serde_json::json!({"variant": name, "mean_map": mean, "std_map": std})
                }).collect::<Vec<_>>(),
            }))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(value) => {
            println!("{value}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
