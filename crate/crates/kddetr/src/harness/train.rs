//! Training loops. One entry point per regime: teacher (detection only),
//! baseline student (detection only), and distillation (detection plus a
//! teacher-alignment term).
//!
//! Every run is a pure function of its [`RunConfig`]: scenes are generated
//! on the fly from the data seeds, model init and point sampling derive from
//! the master seed, and evaluation runs on a fixed validation set. The
//! returned checkpoint holds the best-scoring parameters by mean AP.

use std::collections::BTreeMap;

use crate::data::{average_precision, detections_from, generate, generate_one, ApReport,
    SceneSample, IOU_THRESHOLDS};
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::{EvalPoint, Metrics, RunConfig};
use crate::loss::{baseline_distill_loss, detection_loss, distill_loss};
use crate::matching::{hungarian, matching_cost};
use crate::model::DetrModel;
use crate::points::{build, DistillationPointSet, Strategy};
use crate::rng::derive_seed;
use crate::tensor::{zero_grads, Adam, Tape, Tensor, Var};

const TEACHER_SALT: u64 = 0x7465_6163;
const STUDENT_SALT: u64 = 0x7374_7564;
const POINTS_SALT: u64 = 0x706f_696e;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn param_snapshot(model: &DetrModel) -> BTreeMap<String, Tensor> {
    model
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.snapshot()))
        .collect()
}

fn param_bytes(model: &DetrModel) -> Vec<u8> {
    let mut out = Vec::new();
    for (_, p) in model.named_params() {
        out.extend(p.snapshot().value_bytes());
    }
    out
}

fn install_snapshot(model: &DetrModel, snap: &BTreeMap<String, Tensor>) {
    for (name, p) in model.named_params() {
        p.borrow_mut()
            .values_mut()
            .copy_from_slice(snap[&name].values());
    }
}

/// Mean AP of the model over a scene set, detection mode.
pub fn evaluate(model: &DetrModel, scenes: &[SceneSample]) -> Result<ApReport> {
    let mut preds = Vec::with_capacity(scenes.len());
    let mut gts = Vec::with_capacity(scenes.len());
    for s in scenes {
        let tape = Tape::new();
        let out = model.forward(&tape, &s.image_f64(), None, false)?;
        preds.push(detections_from(
            &tape.tensor_of(out.class_logits),
            &tape.tensor_of(out.boxes),
        ));
        gts.push(s.ground_truth());
    }
    average_precision(&preds, &gts, &IOU_THRESHOLDS)
}

/// Teacher-alignment state threaded through a distillation run.
struct Distiller {
    teacher: DetrModel,
    strategy: Strategy,
    /// Frozen point set, absent when resampling per step or when the
    /// strategy pairs detection outputs instead of shared points.
    frozen: Option<DistillationPointSet>,
    resample: bool,
    points_seed: u64,
    teacher_bytes_before: Vec<u8>,
    hash_checks: u64,
    /// Student-side point constants of the current step, checked for
    /// gradient absence after backward.
    step_point_vars: Vec<Var>,
}

impl Distiller {
    fn new(cfg: &RunConfig, teacher: DetrModel) -> Result<Self> {
        let points_seed = derive_seed(cfg.seed, POINTS_SALT);
        let frozen = if cfg.strategy.uses_shared_points() && !cfg.resample_general_points {
            Some(build(
                cfg.strategy,
                cfg.general_points,
                cfg.student.hidden_dim,
                points_seed,
                Some(&teacher),
            )?)
        } else {
            None
        };
        let teacher_bytes_before = param_bytes(&teacher);
        Ok(Distiller {
            teacher,
            strategy: cfg.strategy,
            frozen,
            resample: cfg.resample_general_points,
            points_seed,
            teacher_bytes_before,
            hash_checks: 0,
            step_point_vars: Vec::new(),
        })
    }

    fn points_for_step(&self, cfg: &RunConfig, step: usize) -> Result<Option<DistillationPointSet>> {
        if !self.strategy.uses_shared_points() {
            return Ok(None);
        }
        if self.resample {
            return Ok(Some(build(
                self.strategy,
                cfg.general_points,
                cfg.student.hidden_dim,
                derive_seed(self.points_seed, step as u64),
                Some(&self.teacher),
            )?));
        }
        Ok(self.frozen.clone())
    }

    /// Distillation term for one scene. `student_det` is the student's
    /// detection-mode output on the live tape, reused by the baselines.
    #[allow(clippy::too_many_arguments)]
    fn scene_loss(
        &mut self,
        tape: &Tape,
        cfg: &RunConfig,
        model: &DetrModel,
        image: &[f64],
        student_det: &crate::model::DetrOutputs,
        gt: &crate::data::GroundTruth,
        points: Option<&DistillationPointSet>,
        step: usize,
    ) -> Result<Var> {
        match points {
            Some(set) => {
                let point_tensor = set.tensor()?;

                let t_tape = Tape::new();
                let t_points = t_tape.constant(point_tensor.clone());
                let t_out = self.teacher.forward(&t_tape, image, Some(t_points), false)?;
                let t_logits = t_tape.tensor_of(t_out.class_logits);
                let t_boxes = t_tape.tensor_of(t_out.boxes);

                let s_points = tape.constant(point_tensor);
                let teacher_hash = fnv1a(&t_tape.tensor_of(t_points).value_bytes());
                let student_hash = fnv1a(&tape.tensor_of(s_points).value_bytes());
                if teacher_hash != student_hash {
                    return Err(Error::Consistency(format!(
                        "step {step}: teacher and student saw different points \
                         ({teacher_hash:#x} vs {student_hash:#x})"
                    )));
                }
                self.hash_checks += 1;
                self.step_point_vars.push(s_points);

                let s_out = model.forward(tape, image, Some(s_points), false)?;
                let report =
                    distill_loss(tape, &t_logits, &t_boxes, &s_out, &cfg.loss, cfg.use_fgw)?;
                Ok(report.total)
            }
            None => {
                let t_tape = Tape::new();
                let t_out = self.teacher.forward(&t_tape, image, None, false)?;
                let t_logits = t_tape.tensor_of(t_out.class_logits);
                let t_boxes = t_tape.tensor_of(t_out.boxes);
                let weights = cfg.loss.cost_weights();
                let t_match = hungarian(&matching_cost(
                    &t_logits,
                    &t_boxes,
                    &gt.classes,
                    &gt.boxes,
                    weights,
                )?)?;
                let s_match = hungarian(&matching_cost(
                    &tape.tensor_of(student_det.class_logits),
                    &tape.tensor_of(student_det.boxes),
                    &gt.classes,
                    &gt.boxes,
                    weights,
                )?)?;
                let report = baseline_distill_loss(
                    tape,
                    self.strategy,
                    &t_logits,
                    &t_boxes,
                    student_det,
                    &t_match,
                    &s_match,
                    gt,
                    &cfg.loss,
                )?;
                Ok(report.total)
            }
        }
    }

    /// Shared points are inputs, never trainable: after backward they must
    /// have no gradient.
    fn assert_points_detached(&mut self, tape: &Tape, step: usize) -> Result<()> {
        for &v in &self.step_point_vars {
            if tape.grad_of(v).is_some() {
                return Err(Error::Consistency(format!(
                    "step {step}: gradient leaked into the frozen distillation points"
                )));
            }
        }
        self.step_point_vars.clear();
        Ok(())
    }

    fn assert_teacher_unchanged(&self) -> Result<()> {
        if param_bytes(&self.teacher) != self.teacher_bytes_before {
            return Err(Error::Consistency(
                "teacher parameters changed during distillation".into(),
            ));
        }
        Ok(())
    }
}

fn mean_of(tape: &Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.affine(acc, 1.0 / vars.len() as f64, 0.0))
}

fn run_loop(
    cfg: &RunConfig,
    model: &DetrModel,
    steps: usize,
    mut distiller: Option<&mut Distiller>,
) -> Result<(Metrics, BTreeMap<String, Tensor>)> {
    let val = generate(cfg.val_seed, cfg.val_scenes, &cfg.scene)?;
    let params = model.params();
    let mut adam = Adam::new(cfg.lr);

    let mut history: Vec<EvalPoint> = Vec::new();
    let mut best_map = f64::NEG_INFINITY;
    let mut best_step = 0usize;
    let mut best_snapshot = param_snapshot(model);
    let mut last_det = 0.0;
    let mut last_dist = 0.0;

    let eval_now = |model: &DetrModel,
                        step: usize,
                        history: &mut Vec<EvalPoint>,
                        best_map: &mut f64,
                        best_step: &mut usize,
                        best_snapshot: &mut BTreeMap<String, Tensor>|
     -> Result<()> {
        let ap = evaluate(model, &val)?;
        history.push(EvalPoint {
            step,
            map: ap.mean_ap,
            ap50: ap.ap50,
            ap75: ap.ap75,
        });
        if ap.mean_ap > *best_map {
            *best_map = ap.mean_ap;
            *best_step = step;
            *best_snapshot = param_snapshot(model);
        }
        eprintln!(
            "[eval @ {step:>5}] mAP {:.4}  AP50 {:.4}  AP75 {:.4}",
            ap.mean_ap, ap.ap50, ap.ap75
        );
        Ok(())
    };

    for step in 0..steps {
        let tape = Tape::new();
        let points = match distiller.as_deref() {
            Some(d) => d.points_for_step(cfg, step)?,
            None => None,
        };
        let mut det_vars = Vec::with_capacity(cfg.batch_size);
        let mut dist_vars = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            let idx = (step * cfg.batch_size + b) % cfg.train_scenes;
            let sample = generate_one(cfg.train_seed, idx as u64, &cfg.scene)?;
            let image = sample.image_f64();
            let gt = sample.ground_truth();
            let out = model.forward(&tape, &image, None, false)?;
            let det = detection_loss(&tape, &out, &gt, &cfg.loss)?;
            det_vars.push(det.total);
            if let Some(d) = distiller.as_deref_mut() {
                dist_vars.push(d.scene_loss(
                    &tape,
                    cfg,
                    model,
                    &image,
                    &out,
                    &gt,
                    points.as_ref(),
                    step,
                )?);
            }
        }

        let det_mean = mean_of(&tape, &det_vars)?;
        last_det = tape.scalar_of(det_mean)?;
        let mut total = tape.affine(det_mean, cfg.detection_weight, 0.0);
        if !dist_vars.is_empty() {
            let dist_mean = mean_of(&tape, &dist_vars)?;
            last_dist = tape.scalar_of(dist_mean)?;
            total = tape.add(total, tape.affine(dist_mean, cfg.distill_weight, 0.0))?;
        }

        let loss_val = tape.scalar_of(total)?;
        if !loss_val.is_finite() {
            return Err(Error::Diverged(format!(
                "step {step}: loss became {loss_val} (detection {last_det}, \
                 distillation {last_dist})"
            )));
        }
        // A batch of object-free scenes leaves the box head outside the
        // graph; pre-zeroed gradients keep the optimizer step uniform.
        zero_grads(&params);
        tape.backward(total)?;
        if let Some(d) = distiller.as_deref_mut() {
            d.assert_points_detached(&tape, step)?;
        }
        adam.step(&params)?;

        if (step + 1) % cfg.eval_interval == 0 || step + 1 == steps {
            eprintln!("[step {:>5}] det {last_det:.4}  dist {last_dist:.4}", step + 1);
            eval_now(
                model,
                step + 1,
                &mut history,
                &mut best_map,
                &mut best_step,
                &mut best_snapshot,
            )?;
        }
    }

    if steps == 0 {
        eval_now(
            model,
            0,
            &mut history,
            &mut best_map,
            &mut best_step,
            &mut best_snapshot,
        )?;
    }

    let last = *history.last().expect("at least one evaluation");
    let metrics = Metrics {
        steps,
        final_map: last.map,
        final_ap50: last.ap50,
        final_ap75: last.ap75,
        best_map,
        best_step,
        final_detection_loss: last_det,
        final_distill_loss: last_dist,
        point_hash_checks: distiller.as_deref().map_or(0, |d| d.hash_checks),
        history,
    };
    Ok((metrics, best_snapshot))
}

/// Trains the teacher with the detection objective only.
pub fn train_teacher(cfg: &RunConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let model = DetrModel::init(cfg.teacher, derive_seed(cfg.seed, TEACHER_SALT))?;
    let (metrics, best) = run_loop(cfg, &model, cfg.teacher_steps, None)?;
    install_snapshot(&model, &best);
    Ok(Checkpoint::from_model(cfg.clone(), &model, None, metrics))
}

/// Trains a student with the detection objective only; the no-distillation
/// control every strategy is compared against.
pub fn train_student_baseline(cfg: &RunConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let model = DetrModel::init(cfg.student_model(), derive_seed(cfg.seed, STUDENT_SALT))?;
    let (metrics, best) = run_loop(cfg, &model, cfg.student_steps, None)?;
    install_snapshot(&model, &best);
    Ok(Checkpoint::from_model(cfg.clone(), &model, None, metrics))
}

/// Distills a fresh student from a trained teacher checkpoint.
pub fn distill(cfg: &RunConfig, teacher_ckpt: &Checkpoint) -> Result<Checkpoint> {
    cfg.validate()?;
    let t = &teacher_ckpt.model;
    if t.hidden_dim != cfg.student.hidden_dim
        || t.image_size != cfg.student.image_size
        || t.num_classes != cfg.student.num_classes
    {
        return Err(Error::Setup(format!(
            "teacher checkpoint ({}px, width {}, {} classes) cannot teach this \
             student ({}px, width {}, {} classes)",
            t.image_size,
            t.hidden_dim,
            t.num_classes,
            cfg.student.image_size,
            cfg.student.hidden_dim,
            cfg.student.num_classes
        )));
    }
    let teacher = teacher_ckpt.restore_model()?;
    let student = DetrModel::init(cfg.student_model(), derive_seed(cfg.seed, STUDENT_SALT))?;
    distill_with_models(cfg, teacher, student)
}

/// Distillation loop over explicit models; [`distill`] is the checkpoint
/// front end. The teacher is left byte-identical to how it arrived.
pub fn distill_with_models(
    cfg: &RunConfig,
    teacher: DetrModel,
    student: DetrModel,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut distiller = Distiller::new(cfg, teacher)?;
    let (metrics, best) = run_loop(cfg, &student, cfg.student_steps, Some(&mut distiller))?;
    distiller.assert_teacher_unchanged()?;
    install_snapshot(&student, &best);
    let point_set = distiller.frozen.take();
    Ok(Checkpoint::from_model(cfg.clone(), &student, point_set, metrics))
}
