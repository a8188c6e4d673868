//! Average precision over a dataset: class-aware greedy matching per image,
//! a pooled precision-recall curve per IoU threshold, and all-point
//! interpolation. The headline number is the mean over thresholds 0.50 to
//! 0.95 in steps of 0.05.

use crate::boxes::{cxcywh_to_xyxy, iou, BoxCxCyWH};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::GroundTruth;

pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub bbox: BoxCxCyWH,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApReport {
    /// (threshold, AP) in threshold order.
    pub per_threshold: Vec<(f64, f64)>,
    pub mean_ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// Turns raw model outputs for one image into detections. The class score is
/// a softmax over all K+1 logits; confidence is the best foreground
/// probability and the no-object column only competes as probability mass.
/// Every query yields a detection; ranking handles the rest.
pub fn detections_from(class_logits: &Tensor, pred_boxes: &Tensor) -> Vec<Detection> {
    let n = class_logits.rows();
    let k1 = class_logits.last_dim();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let logits = class_logits.row(i);
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let (mut best, mut best_p) = (0usize, f64::NEG_INFINITY);
        for (c, &e) in exps.iter().take(k1 - 1).enumerate() {
            let p = e / denom;
            if p > best_p {
                best = c;
                best_p = p;
            }
        }
        out.push(Detection {
            class: best,
            bbox: BoxCxCyWH::from_slice(pred_boxes.row(i)),
            confidence: best_p,
        });
    }
    out
}

struct Flag {
    confidence: f64,
    image: usize,
    index: usize,
    tp: bool,
}

fn ap_at_threshold(
    predictions: &[Vec<Detection>],
    gts: &[GroundTruth],
    threshold: f64,
    total_gt: usize,
) -> f64 {
    let mut flags: Vec<Flag> = Vec::new();
    for (img, (dets, gt)) in predictions.iter().zip(gts).enumerate() {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| {
            dets[b]
                .confidence
                .partial_cmp(&dets[a].confidence)
                .expect("finite confidence")
                .then(a.cmp(&b))
        });
        let mut taken = vec![false; gt.len()];
        for &di in &order {
            let d = &dets[di];
            let dxy = cxcywh_to_xyxy(d.bbox);
            let mut best: Option<(usize, f64)> = None;
            for (j, (&cls, &gb)) in gt.classes.iter().zip(&gt.boxes).enumerate() {
                if taken[j] || cls != d.class {
                    continue;
                }
                let ov = iou(dxy, cxcywh_to_xyxy(gb));
                if best.map_or(true, |(_, b)| ov > b) {
                    best = Some((j, ov));
                }
            }
            let tp = match best {
                Some((j, ov)) if ov >= threshold => {
                    taken[j] = true;
                    true
                }
                _ => false,
            };
            flags.push(Flag {
                confidence: d.confidence,
                image: img,
                index: di,
                tp,
            });
        }
    }

    flags.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .expect("finite confidence")
            .then(a.image.cmp(&b.image))
            .then(a.index.cmp(&b.index))
    });

    let mut precisions = Vec::with_capacity(flags.len());
    let mut recalls = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (seen, f) in flags.iter().enumerate() {
        tp += f.tp as usize;
        precisions.push(tp as f64 / (seen + 1) as f64);
        recalls.push(tp as f64 / total_gt as f64);
    }

    // All-point interpolation: running max of precision from the right, then
    // integrate over recall increments.
    let mut envelope = precisions.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recalls.iter().zip(&envelope) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// AP at each threshold plus their mean. `predictions[i]` belongs to
/// `gts[i]`; confidences must be finite.
pub fn average_precision(
    predictions: &[Vec<Detection>],
    gts: &[GroundTruth],
    thresholds: &[f64],
) -> Result<ApReport> {
    if predictions.len() != gts.len() {
        return Err(Error::Contract(format!(
            "{} prediction sets for {} ground truths",
            predictions.len(),
            gts.len()
        )));
    }
    if gts.is_empty() {
        return Err(Error::Metric("average precision over an empty dataset".into()));
    }
    if predictions
        .iter()
        .flatten()
        .any(|d| !d.confidence.is_finite())
    {
        return Err(Error::Input("non-finite detection confidence".into()));
    }
    let total_gt: usize = gts.iter().map(|g| g.len()).sum();
    if total_gt == 0 {
        return Err(Error::Metric(
            "average precision needs at least one annotated object".into(),
        ));
    }

    let per_threshold: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| (t, ap_at_threshold(predictions, gts, t, total_gt)))
        .collect();
    let mean_ap =
        per_threshold.iter().map(|&(_, ap)| ap).sum::<f64>() / per_threshold.len().max(1) as f64;
    let lookup = |want: f64| {
        per_threshold
            .iter()
            .find(|(t, _)| (t - want).abs() < 1e-9)
            .map(|&(_, ap)| ap)
            .unwrap_or(f64::NAN)
    };
    Ok(ApReport {
        ap50: lookup(0.50),
        ap75: lookup(0.75),
        per_threshold,
        mean_ap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn gt(objs: &[(usize, BoxCxCyWH)]) -> GroundTruth {
        GroundTruth {
            classes: objs.iter().map(|&(c, _)| c).collect(),
            boxes: objs.iter().map(|&(_, b)| b).collect(),
        }
    }

    fn det(class: usize, b: BoxCxCyWH, conf: f64) -> Detection {
        Detection {
            class,
            bbox: b,
            confidence: conf,
        }
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let b1 = BoxCxCyWH::new(0.3, 0.3, 0.2, 0.2);
        let b2 = BoxCxCyWH::new(0.7, 0.7, 0.25, 0.25);
        let gts = vec![gt(&[(0, b1), (2, b2)]), gt(&[(1, b1)])];
        let preds = vec![
            vec![det(0, b1, 1.0), det(2, b2, 1.0)],
            vec![det(1, b1, 1.0)],
        ];
        let r = average_precision(&preds, &gts, &IOU_THRESHOLDS).unwrap();
        for (_, ap) in &r.per_threshold {
            assert!((ap - 1.0).abs() < 1e-12);
        }
        assert!((r.mean_ap - 1.0).abs() < 1e-12);
        assert_eq!(r.ap50, 1.0);
        assert_eq!(r.ap75, 1.0);
    }

    #[test]
    fn no_predictions_scores_zero() {
        let gts = vec![gt(&[(0, BoxCxCyWH::new(0.5, 0.5, 0.2, 0.2))])];
        let preds = vec![vec![]];
        let r = average_precision(&preds, &gts, &IOU_THRESHOLDS).unwrap();
        assert_eq!(r.mean_ap, 0.0);
    }

    #[test]
    fn one_of_two_objects_found_gives_half_ap() {
        let b1 = BoxCxCyWH::new(0.3, 0.3, 0.2, 0.2);
        let b2 = BoxCxCyWH::new(0.7, 0.7, 0.2, 0.2);
        let gts = vec![gt(&[(0, b1), (0, b2)])];
        let preds = vec![vec![det(0, b1, 0.9)]];
        let r = average_precision(&preds, &gts, &[0.5]).unwrap();
        assert!((r.per_threshold[0].1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn wrong_class_never_matches() {
        let b1 = BoxCxCyWH::new(0.3, 0.3, 0.2, 0.2);
        let gts = vec![gt(&[(0, b1)])];
        let preds = vec![vec![det(1, b1, 1.0)]];
        let r = average_precision(&preds, &gts, &[0.5]).unwrap();
        assert_eq!(r.per_threshold[0].1, 0.0);
    }

    #[test]
    fn duplicate_detections_count_once() {
        let b1 = BoxCxCyWH::new(0.5, 0.5, 0.3, 0.3);
        let gts = vec![gt(&[(0, b1)])];
        // Second hit on an already-claimed object is a false positive.
        let preds = vec![vec![det(0, b1, 0.9), det(0, b1, 0.8)]];
        let r = average_precision(&preds, &gts, &[0.5]).unwrap();
        assert!((r.per_threshold[0].1 - 1.0).abs() < 1e-12);
        let swapped = vec![vec![det(0, b1, 0.8), det(0, b1, 0.9)]];
        let r2 = average_precision(&swapped, &gts, &[0.5]).unwrap();
        assert_eq!(r.per_threshold[0].1, r2.per_threshold[0].1);
    }

    #[test]
    fn empty_dataset_is_a_metric_error() {
        assert!(matches!(
            average_precision(&[], &[], &IOU_THRESHOLDS),
            Err(Error::Metric(_))
        ));
    }

    #[test]
    fn unannotated_dataset_is_a_metric_error() {
        let gts = vec![GroundTruth::default()];
        let preds = vec![vec![]];
        assert!(matches!(
            average_precision(&preds, &gts, &IOU_THRESHOLDS),
            Err(Error::Metric(_))
        ));
    }

    fn random_eval_case(seed: u64) -> (Vec<Vec<Detection>>, Vec<GroundTruth>) {
        let mut rng = Rng::seeded(seed);
        let mut gts = Vec::new();
        let mut preds = Vec::new();
        for _ in 0..20 {
            let n_gt = rng.below(4) as usize;
            let mut objs = Vec::new();
            for _ in 0..n_gt {
                let s = rng.uniform(0.15, 0.4);
                objs.push((
                    rng.below(3) as usize,
                    BoxCxCyWH::new(rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75), s, s),
                ));
            }
            let mut ds = Vec::new();
            for &(c, b) in &objs {
                // Jittered copy of each object plus noise detections.
                if rng.next_f64() < 0.8 {
                    let jit = BoxCxCyWH::new(
                        b.cx + rng.uniform(-0.05, 0.05),
                        b.cy + rng.uniform(-0.05, 0.05),
                        b.w * rng.uniform(0.85, 1.15),
                        b.h * rng.uniform(0.85, 1.15),
                    );
                    ds.push(det(c, jit, rng.uniform(0.4, 1.0)));
                }
            }
            for _ in 0..rng.below(3) {
                let s = rng.uniform(0.15, 0.4);
                ds.push(det(
                    rng.below(3) as usize,
                    BoxCxCyWH::new(rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75), s, s),
                    rng.uniform(0.0, 0.6),
                ));
            }
            gts.push(gt(&objs));
            preds.push(ds);
        }
        (preds, gts)
    }

    #[test]
    fn monotone_confidence_rescaling_preserves_ap() {
        let (preds, gts) = random_eval_case(31337);
        let base = average_precision(&preds, &gts, &IOU_THRESHOLDS).unwrap();
        let rescaled: Vec<Vec<Detection>> = preds
            .iter()
            .map(|v| {
                v.iter()
                    .map(|d| Detection {
                        confidence: 0.1 + 0.5 / (1.0 + (-3.0 * d.confidence).exp()),
                        ..*d
                    })
                    .collect()
            })
            .collect();
        let moved = average_precision(&rescaled, &gts, &IOU_THRESHOLDS).unwrap();
        assert_eq!(base.per_threshold, moved.per_threshold);
    }

    #[test]
    fn top_confidence_false_positive_never_helps() {
        for seed in [1u64, 2, 3, 4, 5] {
            let (mut preds, gts) = random_eval_case(seed * 1000 + 17);
            let base = average_precision(&preds, &gts, &IOU_THRESHOLDS).unwrap();
            // A far-corner sliver overlaps nothing at any threshold.
            preds[0].push(det(0, BoxCxCyWH::new(0.015, 0.015, 0.02, 0.02), 2.0));
            let hurt = average_precision(&preds, &gts, &IOU_THRESHOLDS).unwrap();
            for ((_, a), (_, b)) in base.per_threshold.iter().zip(&hurt.per_threshold) {
                assert!(b <= &(a + 1e-12), "AP rose from {a} to {b}");
            }
        }
    }

    #[test]
    fn detections_carry_best_foreground_class() {
        // Row 0: foreground class 1 dominates. Row 1: no-object dominates
        // the softmax but the detection still reports the best foreground.
        let logits =
            Tensor::new(vec![2, 4], vec![0.0, 3.0, 1.0, -1.0, 0.0, 0.5, 0.2, 5.0]).unwrap();
        let boxes = Tensor::new(vec![2, 4], vec![0.5, 0.5, 0.2, 0.2, 0.4, 0.4, 0.1, 0.1]).unwrap();
        let dets = detections_from(&logits, &boxes);
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[0].class, 1);
        assert!(dets[0].confidence > 0.5);
        assert_eq!(dets[1].class, 1);
        assert!(dets[1].confidence < 0.2);
        let p: Vec<f64> = logits
            .row(0)
            .iter()
            .map(|&l| l.exp())
            .collect();
        let z: f64 = p.iter().sum();
        assert!((dets[0].confidence - p[1] / z).abs() < 1e-12);
    }
}
