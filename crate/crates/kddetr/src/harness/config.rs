//! Run configuration and evaluation metrics. A [`RunConfig`] fully
//! determines a training run; together with the master seed it pins every
//! random draw, so identical configs produce identical metrics byte for
//! byte.

use serde::{Deserialize, Serialize};

use crate::data::SceneConfig;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::model::ModelConfig;
use crate::points::Strategy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub loss: LossWeights,
    pub strategy: Strategy,
    /// Number of uniform-random query vectors in the shared point set.
    pub general_points: usize,
    pub use_fgw: bool,
    /// Scale on the detection term of the combined objective.
    pub detection_weight: f64,
    /// Scale on the distillation term when combined with the detection term.
    pub distill_weight: f64,
    /// Redraw the random part of the point set every step instead of
    /// freezing one set for the whole run.
    pub resample_general_points: bool,
    /// Widens the student's own query stack, leaving everything else alone.
    /// Exists to measure whether extra plain queries can stand in for
    /// distillation points.
    pub extra_plain_queries: usize,
    pub lr: f64,
    pub teacher_steps: usize,
    pub student_steps: usize,
    pub batch_size: usize,
    pub scene: SceneConfig,
    pub train_seed: u64,
    pub train_scenes: usize,
    pub val_seed: u64,
    pub val_scenes: usize,
    pub eval_interval: usize,
    /// Master seed for model initialization and point sampling.
    pub seed: u64,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            teacher: ModelConfig::teacher(),
            student: ModelConfig::student(),
            loss: LossWeights::default(),
            strategy: Strategy::Combined,
            general_points: 20,
            use_fgw: true,
            detection_weight: 1.0,
            distill_weight: 1.0,
            resample_general_points: false,
            extra_plain_queries: 0,
            lr: 1e-3,
            teacher_steps: 6000,
            student_steps: 4000,
            batch_size: 8,
            scene: SceneConfig::default(),
            train_seed: 11,
            train_scenes: 2000,
            val_seed: 1_000_003,
            val_scenes: 500,
            eval_interval: 500,
            seed: 7,
            out_dir: "runs".into(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.student.validate()?;
        self.loss.validate()?;
        self.scene.validate()?;
        if self.teacher.hidden_dim != self.student.hidden_dim {
            return Err(Error::Config(format!(
                "teacher width {} and student width {} cannot share query vectors",
                self.teacher.hidden_dim, self.student.hidden_dim
            )));
        }
        if self.teacher.image_size != self.student.image_size
            || self.teacher.num_classes != self.student.num_classes
        {
            return Err(Error::Config(
                "teacher and student must agree on image size and class count".into(),
            ));
        }
        for (who, m) in [("teacher", &self.teacher), ("student", &self.student)] {
            if m.num_queries < self.scene.max_objects {
                return Err(Error::Config(format!(
                    "{who} has {} queries but scenes can hold {} objects",
                    m.num_queries, self.scene.max_objects
                )));
            }
        }
        if self.scene.k != self.teacher.num_classes {
            return Err(Error::Config(format!(
                "scenes draw {} classes but the models predict {}",
                self.scene.k, self.teacher.num_classes
            )));
        }
        if self.scene.image_size != self.teacher.image_size {
            return Err(Error::Config(format!(
                "scenes are {}px but the models expect {}px",
                self.scene.image_size, self.teacher.image_size
            )));
        }
        if self.batch_size == 0 || self.train_scenes == 0 || self.val_scenes == 0 {
            return Err(Error::Config(
                "batch size and dataset sizes must be positive".into(),
            ));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval interval must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        for (name, v) in [
            ("detection", self.detection_weight),
            ("distillation", self.distill_weight),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("bad {name} weight {v}")));
            }
        }
        if self.strategy.uses_shared_points()
            && self.strategy != Strategy::SpecificOnly
            && self.general_points == 0
        {
            return Err(Error::Config(format!(
                "{} needs at least one general point",
                self.strategy
            )));
        }
        Ok(())
    }

    /// Student model widened by the plain-query control knob.
    pub fn student_model(&self) -> ModelConfig {
        ModelConfig {
            num_queries: self.student.num_queries + self.extra_plain_queries,
            ..self.student
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// One evaluation sample along a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// Final record of a run. Deliberately excludes wall time so reruns of the
/// same config serialize identically.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub steps: usize,
    pub final_map: f64,
    pub final_ap50: f64,
    pub final_ap75: f64,
    pub best_map: f64,
    pub best_step: usize,
    pub final_detection_loss: f64,
    pub final_distill_loss: f64,
    /// Count of per-scene teacher/student point-hash comparisons performed;
    /// zero outside shared-point distillation.
    pub point_hash_checks: u64,
    pub history: Vec<EvalPoint>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let cfg = RunConfig {
            student: ModelConfig {
                hidden_dim: 32,
                num_heads: 4,
                ..ModelConfig::student()
            },
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn too_few_queries_for_scene_capacity_is_rejected() {
        let cfg = RunConfig {
            student: ModelConfig {
                num_queries: 3,
                ..ModelConfig::student()
            },
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn json_round_trip_preserves_every_field() {
        let cfg = RunConfig {
            strategy: Strategy::GeneralOnly,
            general_points: 7,
            use_fgw: false,
            lr: 0.25e-3,
            ..RunConfig::default()
        };
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"general_points": 5, "use_fgw": false}"#).unwrap();
        assert_eq!(cfg.general_points, 5);
        assert!(!cfg.use_fgw);
        assert_eq!(cfg.lr, RunConfig::default().lr);
    }

    #[test]
    fn extra_queries_only_widen_the_student() {
        let cfg = RunConfig {
            extra_plain_queries: 30,
            ..RunConfig::default()
        };
        assert_eq!(
            cfg.student_model().num_queries,
            cfg.student.num_queries + 30
        );
        assert_eq!(cfg.student_model().hidden_dim, cfg.student.hidden_dim);
    }
}
