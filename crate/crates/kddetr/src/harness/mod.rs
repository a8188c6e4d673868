//! Experiment plumbing: run configuration, checkpoint files, the three
//! training loops, and the ablation suites.

mod ablation;
mod checkpoint;
mod config;
mod train;

pub use ablation::{run_ablation, suite_variants, AblationResults, CellRow, Suite, CSV_HEADER};
pub use checkpoint::Checkpoint;
pub use config::{EvalPoint, Metrics, RunConfig};
pub use train::{distill, distill_with_models, evaluate, train_student_baseline, train_teacher};
