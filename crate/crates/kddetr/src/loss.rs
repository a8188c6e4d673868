//! Training objectives: the Hungarian-matched detection loss and the
//! teacher-student distillation loss over shared query points, with optional
//! per-point foreground weighting and the three pairing baselines that skip
//! the shared set.
//!
//! Teacher outputs always enter as detached tensors (plain values computed on
//! a throwaway tape), so gradients can only flow into the student.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boxes::{giou_on_tape, to_xyxy_on_tape};
use crate::data::GroundTruth;
use crate::error::{Error, Result};
use crate::matching::{hungarian, matching_cost, Assignment, CostWeights};
use crate::model::DetrOutputs;
use crate::points::Strategy;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    /// Softening temperature of the distillation KL term only; the
    /// foreground weights always read teacher probabilities at temperature 1.
    pub temperature: f64,
    pub no_object_class_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 1.0,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            temperature: 2.0,
            no_object_class_weight: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_cls < 0.0
            || self.lambda_l1 < 0.0
            || self.lambda_giou < 0.0
            || self.no_object_class_weight < 0.0
        {
            return Err(Error::Param("loss coefficients must be non-negative".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Param(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn cost_weights(&self) -> CostWeights {
        CostWeights {
            class_w: self.lambda_cls,
            l1_w: self.lambda_l1,
            giou_w: self.lambda_giou,
        }
    }
}

/// Per-term values of one loss evaluation, detached and normalized (divide
/// sums by N for the class term, G for detection box terms, M for
/// distillation terms). The weighted recombination
/// `lambda_cls * ce_or_kl + lambda_l1 * l1 + lambda_giou * giou` reproduces
/// the scalar total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub detection_ce: f64,
    pub detection_l1: f64,
    pub detection_giou: f64,
    pub distill_kl: f64,
    pub distill_l1: f64,
    pub distill_giou: f64,
}

impl Components {
    pub fn as_map(&self) -> BTreeMap<&'static str, f64> {
        BTreeMap::from([
            ("detection_ce", self.detection_ce),
            ("detection_l1", self.detection_l1),
            ("detection_giou", self.detection_giou),
            ("distill_kl", self.distill_kl),
            ("distill_l1", self.distill_l1),
            ("distill_giou", self.distill_giou),
        ])
    }
}

/// One loss evaluation: the differentiable total still on the tape plus
/// detached diagnostics.
pub struct LossReport {
    pub total: Var,
    pub components: Components,
    pub per_point_weights: Vec<f64>,
}

fn softmax_host(row: &[f64], temperature: f64) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|&v| ((v - m) / temperature).exp()).collect();
    let denom: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= denom;
    }
    out
}

/// Hungarian-matched set loss. Matched queries pay cross-entropy to their
/// object class plus L1 and GIoU box terms; unmatched queries pay
/// cross-entropy to no-object scaled by `no_object_class_weight`. The class
/// term averages over all N queries, box terms over the G objects.
pub fn detection_loss(
    tape: &Tape,
    pred: &DetrOutputs,
    gt: &GroundTruth,
    w: &LossWeights,
) -> Result<LossReport> {
    w.validate()?;
    let logits_val = tape.tensor_of(pred.class_logits);
    let boxes_val = tape.tensor_of(pred.boxes);
    let n = logits_val.rows();
    let k1 = logits_val.last_dim();
    let g = gt.len();

    let cost = matching_cost(&logits_val, &boxes_val, &gt.classes, &gt.boxes, w.cost_weights())?;
    let assignment = hungarian(&cost)?;

    // Cross-entropy as a mask against log-softmax rows: the mask holds
    // -weight at each query's target column.
    let no_object = k1 - 1;
    let mut targets = vec![no_object; n];
    for &(pi, gj) in &assignment.pairs {
        targets[pi] = gt.classes[gj];
    }
    let mut mask = vec![0.0; n * k1];
    for (i, &t) in targets.iter().enumerate() {
        let weight = if t == no_object {
            w.no_object_class_weight
        } else {
            1.0
        };
        mask[i * k1 + t] = -weight;
    }
    let log_probs = tape.log_softmax(pred.class_logits, 1.0)?;
    let ce_sum = tape.sum(tape.mul(log_probs, tape.constant(Tensor::new(vec![n, k1], mask)?))?);
    let ce_mean = tape.affine(ce_sum, 1.0 / n as f64, 0.0);

    let (total, components) = if g == 0 {
        let total = tape.affine(ce_mean, w.lambda_cls, 0.0);
        (
            total,
            Components {
                detection_ce: tape.scalar_of(ce_mean)?,
                ..Components::default()
            },
        )
    } else {
        let order: Vec<usize> = assignment.pairs.iter().map(|&(p, _)| p).collect();
        let matched = tape.select_rows(pred.boxes, &order)?;
        let mut gt_flat = Vec::with_capacity(g * 4);
        for b in &gt.boxes {
            gt_flat.extend(b.to_array());
        }
        let gt_boxes = tape.constant(Tensor::new(vec![g, 4], gt_flat)?);

        let l1_sum = tape.sum(tape.abs(tape.sub(matched, gt_boxes)?));
        let l1_mean = tape.affine(l1_sum, 1.0 / g as f64, 0.0);

        let gi = giou_on_tape(
            tape,
            to_xyxy_on_tape(tape, matched)?,
            to_xyxy_on_tape(tape, gt_boxes)?,
        )?;
        let giou_mean = tape.mean(tape.affine(gi, -1.0, 1.0));

        let total = tape.add(
            tape.add(
                tape.affine(ce_mean, w.lambda_cls, 0.0),
                tape.affine(l1_mean, w.lambda_l1, 0.0),
            )?,
            tape.affine(giou_mean, w.lambda_giou, 0.0),
        )?;
        (
            total,
            Components {
                detection_ce: tape.scalar_of(ce_mean)?,
                detection_l1: tape.scalar_of(l1_mean)?,
                detection_giou: tape.scalar_of(giou_mean)?,
                ..Components::default()
            },
        )
    };

    Ok(LossReport {
        total,
        components,
        per_point_weights: Vec::new(),
    })
}

/// KL(softmax(teacher/T) || softmax(student/T)) for a single logit row; the
/// teacher side is a plain constant, so gradients reach only the student.
pub fn kl_div(
    tape: &Tape,
    teacher_logits: &[f64],
    student_logits: Var,
    temperature: f64,
) -> Result<Var> {
    let shape = tape.shape_of(student_logits);
    let width = shape.last().copied().unwrap_or(0);
    let numel: usize = shape.iter().product();
    if width != teacher_logits.len() || numel != width {
        return Err(Error::Contract(format!(
            "teacher row of width {} against student shape {shape:?}",
            teacher_logits.len()
        )));
    }
    let probs = softmax_host(teacher_logits, temperature);
    let log_probs: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
    let ls = tape.log_softmax(student_logits, temperature)?;
    let diff = tape.sub(
        tape.constant(Tensor::new(shape.clone(), log_probs)?),
        ls,
    )?;
    Ok(tape.sum(tape.mul(
        tape.constant(Tensor::new(shape, probs)?),
        diff,
    )?))
}

/// Plain-value counterpart of [`kl_div`], used as an independent oracle.
pub fn kl_div_scalar(teacher_logits: &[f64], student_logits: &[f64], temperature: f64) -> f64 {
    let p = softmax_host(teacher_logits, temperature);
    let q = softmax_host(student_logits, temperature);
    p.iter()
        .zip(&q)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

/// Largest teacher probability over the foreground classes; the trailing
/// no-object column never participates. Input must be a normalized
/// probability row of at least two entries.
pub fn foreground_weight(teacher_probs: &[f64]) -> Result<f64> {
    if teacher_probs.len() < 2 {
        return Err(Error::Contract(
            "probability row needs at least one foreground class plus no-object".into(),
        ));
    }
    let sum: f64 = teacher_probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!(
            "probability row sums to {sum}, expected 1"
        )));
    }
    Ok(teacher_probs[..teacher_probs.len() - 1]
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Unnormalized weighted term sums over P aligned pairs. Student rows are
/// live tape variables; teacher rows are detached values of the same shape.
fn pair_sums(
    tape: &Tape,
    teacher_logits: &Tensor,
    teacher_boxes: &Tensor,
    student_logits: Var,
    student_boxes: Var,
    weights: &[f64],
    temperature: f64,
) -> Result<(Var, Var, Var)> {
    let p = teacher_logits.rows();
    let k1 = teacher_logits.last_dim();

    let mut weighted_probs = vec![0.0; p * k1];
    let mut log_probs = vec![0.0; p * k1];
    for i in 0..p {
        let probs = softmax_host(teacher_logits.row(i), temperature);
        for (c, &pr) in probs.iter().enumerate() {
            weighted_probs[i * k1 + c] = weights[i] * pr;
            log_probs[i * k1 + c] = pr.ln();
        }
    }
    let ls = tape.log_softmax(student_logits, temperature)?;
    let diff = tape.sub(tape.constant(Tensor::new(vec![p, k1], log_probs)?), ls)?;
    let kl_sum = tape.sum(tape.mul(
        tape.constant(Tensor::new(vec![p, k1], weighted_probs)?),
        diff,
    )?);

    let w4: Vec<f64> = weights.iter().flat_map(|&w| [w, w, w, w]).collect();
    let box_diff = tape.abs(tape.sub(student_boxes, tape.constant(teacher_boxes.clone()))?);
    let l1_sum = tape.sum(tape.mul(box_diff, tape.constant(Tensor::new(vec![p, 4], w4)?))?);

    let gi = giou_on_tape(
        tape,
        to_xyxy_on_tape(tape, student_boxes)?,
        to_xyxy_on_tape(tape, tape.constant(teacher_boxes.clone()))?,
    )?;
    let giou_sum = tape.sum(tape.mul(
        tape.affine(gi, -1.0, 1.0),
        tape.constant(Tensor::new(vec![p, 1], weights.to_vec())?),
    )?);

    Ok((kl_sum, l1_sum, giou_sum))
}

fn sums_to_report(
    tape: &Tape,
    sums: (Var, Var, Var),
    m: usize,
    w: &LossWeights,
    weights: Vec<f64>,
) -> Result<LossReport> {
    let (kl, l1, gi) = sums;
    let inv = 1.0 / m as f64;
    let total = tape.add(
        tape.add(
            tape.affine(kl, w.lambda_cls * inv, 0.0),
            tape.affine(l1, w.lambda_l1 * inv, 0.0),
        )?,
        tape.affine(gi, w.lambda_giou * inv, 0.0),
    )?;
    Ok(LossReport {
        total,
        components: Components {
            distill_kl: tape.scalar_of(kl)? * inv,
            distill_l1: tape.scalar_of(l1)? * inv,
            distill_giou: tape.scalar_of(gi)? * inv,
            ..Components::default()
        },
        per_point_weights: weights,
    })
}

/// Distillation loss over M aligned points with caller-chosen per-point
/// weights: `mean_i w_i * (lambda_cls KL_i + lambda_l1 L1_i +
/// lambda_giou (1 - GIoU_i))`.
pub fn distill_loss_with_weights(
    tape: &Tape,
    teacher_logits: &Tensor,
    teacher_boxes: &Tensor,
    student: &DetrOutputs,
    w: &LossWeights,
    weights: &[f64],
) -> Result<LossReport> {
    w.validate()?;
    let s_shape = tape.shape_of(student.class_logits);
    if teacher_logits.shape() != s_shape.as_slice() {
        return Err(Error::Consistency(format!(
            "teacher produced {:?} logits, student {:?}; the models did not \
             decode the same point set",
            teacher_logits.shape(),
            s_shape
        )));
    }
    let b_shape = tape.shape_of(student.boxes);
    if teacher_boxes.shape() != b_shape.as_slice() {
        return Err(Error::Consistency(format!(
            "teacher produced {:?} boxes, student {:?}",
            teacher_boxes.shape(),
            b_shape
        )));
    }
    let m = teacher_logits.rows();
    if weights.len() != m {
        return Err(Error::Consistency(format!(
            "{} weights for {m} points",
            weights.len()
        )));
    }
    if m == 0 {
        return Ok(zero_report(tape));
    }
    let sums = pair_sums(
        tape,
        teacher_logits,
        teacher_boxes,
        student.class_logits,
        student.boxes,
        weights,
        w.temperature,
    )?;
    sums_to_report(tape, sums, m, w, weights.to_vec())
}

/// Distillation loss over a shared point set. With `use_fgw` each point is
/// weighted by the teacher's best foreground probability at that point
/// (temperature 1); otherwise all weights are 1.
pub fn distill_loss(
    tape: &Tape,
    teacher_logits: &Tensor,
    teacher_boxes: &Tensor,
    student: &DetrOutputs,
    w: &LossWeights,
    use_fgw: bool,
) -> Result<LossReport> {
    let m = teacher_logits.rows();
    let weights: Vec<f64> = if use_fgw {
        (0..m)
            .map(|i| foreground_weight(&softmax_host(teacher_logits.row(i), 1.0)))
            .collect::<Result<_>>()?
    } else {
        vec![1.0; m]
    };
    distill_loss_with_weights(tape, teacher_logits, teacher_boxes, student, w, &weights)
}

fn zero_report(tape: &Tape) -> LossReport {
    LossReport {
        total: tape.constant(Tensor::scalar(0.0)),
        components: Components::default(),
        per_point_weights: Vec::new(),
    }
}

fn host_rows(t: &Tensor, indices: &[usize]) -> Tensor {
    let w = t.last_dim();
    let mut out = Vec::with_capacity(indices.len() * w);
    for &i in indices {
        out.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![indices.len(), w], out).expect("row gather")
}

fn host_mean_row(t: &Tensor, indices: &[usize]) -> Tensor {
    let w = t.last_dim();
    let mut out = vec![0.0; w];
    for &i in indices {
        for (o, v) in out.iter_mut().zip(t.row(i)) {
            *o += v / indices.len() as f64;
        }
    }
    Tensor::new(vec![1, w], out).expect("mean row")
}

/// Averages tape rows with a constant 1/n row-vector matmul.
fn tape_mean_row(tape: &Tape, x: Var, indices: &[usize]) -> Result<Var> {
    let sel = tape.select_rows(x, indices)?;
    let coeff = vec![1.0 / indices.len() as f64; indices.len()];
    tape.matmul(
        tape.constant(Tensor::new(vec![1, indices.len()], coeff)?),
        sel,
    )
}

/// The pairing baselines, which run both models in detection mode (their own
/// queries) and align outputs without a shared point set:
///
/// * `Inconsistent`: row i of the teacher against row i of the student over
///   the common query-count prefix.
/// * `SimilarForeground`: only ground-truth-matched predictions, both sides
///   ordered by object index.
/// * `SimilarGeneral`: the foreground pairs plus one extra pair built from
///   each model's averaged unmatched (negative) predictions.
///
/// All pairs are weighted 1 and the loss is normalized by the pair count.
pub fn baseline_distill_loss(
    tape: &Tape,
    strategy: Strategy,
    teacher_logits: &Tensor,
    teacher_boxes: &Tensor,
    student: &DetrOutputs,
    teacher_match: &Assignment,
    student_match: &Assignment,
    gt: &GroundTruth,
    w: &LossWeights,
) -> Result<LossReport> {
    w.validate()?;
    if strategy.uses_shared_points() {
        return Err(Error::Contract(format!(
            "{strategy} decodes a shared point set; use distill_loss"
        )));
    }
    let n_t = teacher_logits.rows();
    let n_s = tape.shape_of(student.class_logits)[0];

    match strategy {
        Strategy::Inconsistent => {
            let p = n_t.min(n_s);
            let idx: Vec<usize> = (0..p).collect();
            let sums = pair_sums(
                tape,
                &host_rows(teacher_logits, &idx),
                &host_rows(teacher_boxes, &idx),
                tape.select_rows(student.class_logits, &idx)?,
                tape.select_rows(student.boxes, &idx)?,
                &vec![1.0; p],
                w.temperature,
            )?;
            sums_to_report(tape, sums, p, w, vec![1.0; p])
        }
        Strategy::SimilarForeground | Strategy::SimilarGeneral => {
            let g = gt.len();
            let mut t_idx = Vec::with_capacity(g);
            let mut s_idx = Vec::with_capacity(g);
            for j in 0..g {
                let (Some(ti), Some(si)) =
                    (teacher_match.prediction_for(j), student_match.prediction_for(j))
                else {
                    return Err(Error::Contract(format!(
                        "matching misses ground-truth object {j}"
                    )));
                };
                t_idx.push(ti);
                s_idx.push(si);
            }

            let mut total_pairs = g;
            let mut fg_sums = if g > 0 {
                Some(pair_sums(
                    tape,
                    &host_rows(teacher_logits, &t_idx),
                    &host_rows(teacher_boxes, &t_idx),
                    tape.select_rows(student.class_logits, &s_idx)?,
                    tape.select_rows(student.boxes, &s_idx)?,
                    &vec![1.0; g],
                    w.temperature,
                )?)
            } else {
                None
            };

            if strategy == Strategy::SimilarGeneral {
                let t_neg: Vec<usize> = (0..n_t).filter(|i| !t_idx.contains(i)).collect();
                let s_neg: Vec<usize> = (0..n_s).filter(|i| !s_idx.contains(i)).collect();
                if !t_neg.is_empty() && !s_neg.is_empty() {
                    let avg_sums = pair_sums(
                        tape,
                        &host_mean_row(teacher_logits, &t_neg),
                        &host_mean_row(teacher_boxes, &t_neg),
                        tape_mean_row(tape, student.class_logits, &s_neg)?,
                        tape_mean_row(tape, student.boxes, &s_neg)?,
                        &[1.0],
                        w.temperature,
                    )?;
                    total_pairs += 1;
                    fg_sums = Some(match fg_sums {
                        None => avg_sums,
                        Some((kl, l1, gi)) => (
                            tape.add(kl, avg_sums.0)?,
                            tape.add(l1, avg_sums.1)?,
                            tape.add(gi, avg_sums.2)?,
                        ),
                    });
                }
            }

            match fg_sums {
                None => Ok(zero_report(tape)),
                Some(sums) => sums_to_report(tape, sums, total_pairs, w, vec![1.0; total_pairs]),
            }
        }
        _ => unreachable!("shared-point strategies handled above"),
    }
}
