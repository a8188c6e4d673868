//! Minimum-cost bipartite matching between the model's query predictions and
//! ground-truth objects, plus the standard cost composure used by both the
//! detection loss and the distillation pair builders.
//!
//! The matcher assigns every ground-truth object to a distinct prediction,
//! which requires at least as many predictions as objects. Gradients never
//! flow through the assignment; it is recomputed from detached values each
//! step and treated as a constant index set.

use crate::boxes::{cxcywh_to_xyxy, giou, BoxCxCyWH};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rectangular cost table, `rows` predictions by `cols` ground-truth
/// objects, stored row-major.
#[derive(Clone, Debug)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    costs: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, costs: Vec<f64>) -> Result<Self> {
        if costs.len() != rows * cols {
            return Err(Error::Contract(format!(
                "cost matrix {rows}x{cols} wants {} entries, got {}",
                rows * cols,
                costs.len()
            )));
        }
        if costs.iter().any(|v| v.is_nan()) {
            return Err(Error::Input("cost matrix contains NaN".into()));
        }
        if costs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("cost matrix contains non-finite entries".into()));
        }
        Ok(CostMatrix { rows, cols, costs })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.costs[i * self.cols + j]
    }
}

/// A complete matching: one (prediction, ground truth) pair per object.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Ordered by ground-truth index; prediction indices are distinct.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    /// Prediction index matched to ground-truth object `j`, if any.
    pub fn prediction_for(&self, j: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(_, gt)| gt == j).map(|&(p, _)| p)
    }
}

/// Shortest-augmenting-path assignment (Jonker-Volgenant style potentials).
/// Runs one augmentation per ground-truth column; deterministic because every
/// scan takes the first strict improvement, so cost ties resolve toward the
/// lowest prediction index.
pub fn hungarian(c: &CostMatrix) -> Result<Assignment> {
    let n = c.rows;
    let g = c.cols;
    if n < g {
        return Err(Error::Contract(format!(
            "matcher needs at least as many predictions as objects, got {n} predictions for {g} objects"
        )));
    }
    if g == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }

    // 1-indexed arrays; "row" = ground-truth object, "col" = prediction.
    let cost = |gt: usize, pred: usize| c.at(pred - 1, gt - 1);
    let mut u = vec![0.0; g + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_gt = vec![0usize; n + 1]; // prediction -> gt, 0 = free
    let mut way = vec![0usize; n + 1];

    for gt in 1..=g {
        matched_gt[0] = gt;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_gt[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_gt[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_gt[j0] == 0 {
                break;
            }
        }
        while j0 != 0 {
            let j1 = way[j0];
            matched_gt[j0] = matched_gt[j1];
            j0 = j1;
        }
    }

    let mut pairs = vec![(usize::MAX, usize::MAX); g];
    let mut total = 0.0;
    for pred in 1..=n {
        let gt = matched_gt[pred];
        if gt != 0 {
            pairs[gt - 1] = (pred - 1, gt - 1);
            total += c.at(pred - 1, gt - 1);
        }
    }
    Ok(Assignment {
        pairs,
        total_cost: total,
    })
}

/// Coefficients of the matching cost; defaults mirror the detection loss
/// weights so one coefficient set drives both.
#[derive(Clone, Copy, Debug)]
pub struct CostWeights {
    pub class_w: f64,
    pub l1_w: f64,
    pub giou_w: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            class_w: 1.0,
            l1_w: 5.0,
            giou_w: 2.0,
        }
    }
}

/// Builds the N×G matching cost from detached prediction values:
/// `−class_w · p_i(class_j) + l1_w · ‖b_i − b_j‖₁ + giou_w · (1 − GIoU)`.
/// Class probabilities come from a softmax over all K+1 classes; the
/// no-object class never appears as a ground-truth label.
pub fn matching_cost(
    class_logits: &Tensor,
    pred_boxes: &Tensor,
    gt_classes: &[usize],
    gt_boxes: &[BoxCxCyWH],
    w: CostWeights,
) -> Result<CostMatrix> {
    let n = class_logits.rows();
    let g = gt_classes.len();
    if g > n {
        return Err(Error::Contract(format!(
            "{g} objects exceed {n} predictions"
        )));
    }
    if gt_boxes.len() != g {
        return Err(Error::Contract(format!(
            "{} ground-truth boxes for {g} labels",
            gt_boxes.len()
        )));
    }
    let k1 = class_logits.last_dim();
    if pred_boxes.rows() != n || pred_boxes.last_dim() != 4 {
        return Err(Error::dim("matching_cost", class_logits.shape(), pred_boxes.shape()));
    }
    if let Some(&c) = gt_classes.iter().find(|&&c| c >= k1) {
        return Err(Error::Contract(format!(
            "ground-truth class {c} out of range for {k1} logits"
        )));
    }

    let mut costs = vec![0.0; n * g];
    let mut probs = vec![0.0; k1];
    for i in 0..n {
        let logits = class_logits.row(i);
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (p, &l) in probs.iter_mut().zip(logits) {
            *p = (l - m).exp();
            denom += *p;
        }
        for p in probs.iter_mut() {
            *p /= denom;
        }
        let pb = BoxCxCyWH::from_slice(pred_boxes.row(i));
        let pxy = cxcywh_to_xyxy(pb);
        for (j, (&cls, gb)) in gt_classes.iter().zip(gt_boxes).enumerate() {
            let l1 = (pb.cx - gb.cx).abs()
                + (pb.cy - gb.cy).abs()
                + (pb.w - gb.w).abs()
                + (pb.h - gb.h).abs();
            let gi = giou(pxy, cxcywh_to_xyxy(*gb));
            costs[i * g + j] = -w.class_w * probs[cls] + w.l1_w * l1 + w.giou_w * (1.0 - gi);
        }
    }
    CostMatrix::new(n, g, costs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn brute_force(c: &CostMatrix) -> f64 {
        // Minimum over all injective maps gt -> prediction.
        fn rec(c: &CostMatrix, gt: usize, used: &mut Vec<bool>) -> f64 {
            if gt == c.cols() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for pred in 0..c.rows() {
                if used[pred] {
                    continue;
                }
                used[pred] = true;
                let cand = c.at(pred, gt) + rec(c, gt + 1, used);
                used[pred] = false;
                best = best.min(cand);
            }
            best
        }
        rec(c, 0, &mut vec![false; c.rows()])
    }

    #[test]
    fn single_entry() {
        let c = CostMatrix::new(1, 1, vec![5.0]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(a.total_cost, 5.0);
    }

    #[test]
    fn two_by_two_diagonal() {
        let c = CostMatrix::new(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.total_cost, 2.0);
        assert_eq!(a.prediction_for(0), Some(0));
        assert_eq!(a.prediction_for(1), Some(1));
    }

    #[test]
    fn three_by_three_hand_case() {
        let c = CostMatrix::new(3, 3, vec![4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.total_cost, 5.0);
        assert_eq!(a.prediction_for(0), Some(1));
        assert_eq!(a.prediction_for(1), Some(0));
        assert_eq!(a.prediction_for(2), Some(2));
    }

    #[test]
    fn empty_ground_truth_gives_empty_assignment() {
        let c = CostMatrix::new(4, 0, vec![]).unwrap();
        let a = hungarian(&c).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn more_objects_than_predictions_is_a_contract_error() {
        let c = CostMatrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(matches!(hungarian(&c), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_costs_are_rejected() {
        assert!(matches!(
            CostMatrix::new(1, 1, vec![f64::NAN]),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            CostMatrix::new(1, 1, vec![f64::INFINITY]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn matches_brute_force_on_1000_random_matrices() {
        let mut rng = Rng::seeded(99);
        for trial in 0..1000 {
            let g = 1 + rng.below(7) as usize;
            let n = g + rng.below((8 - g as u64).max(1)) as usize;
            let n = n.min(7);
            let costs: Vec<f64> = (0..n * g).map(|_| rng.uniform(-5.0, 5.0)).collect();
            let c = CostMatrix::new(n, g, costs).unwrap();
            let a = hungarian(&c).unwrap();
            let oracle = brute_force(&c);
            assert!(
                (a.total_cost - oracle).abs() < 1e-9,
                "trial {trial}: {n}x{g} hungarian {} vs brute force {oracle}",
                a.total_cost
            );

            // Structural invariants of the returned assignment.
            assert_eq!(a.pairs.len(), g);
            let mut preds: Vec<usize> = a.pairs.iter().map(|&(p, _)| p).collect();
            preds.sort_unstable();
            preds.dedup();
            assert_eq!(preds.len(), g, "prediction indices must be distinct");
            let mut gts: Vec<usize> = a.pairs.iter().map(|&(_, j)| j).collect();
            gts.sort_unstable();
            assert_eq!(gts, (0..g).collect::<Vec<_>>());
            let sum: f64 = a.pairs.iter().map(|&(p, j)| c.at(p, j)).sum();
            assert!((sum - a.total_cost).abs() < 1e-9);
        }
    }

    #[test]
    fn integer_ties_resolve_deterministically() {
        let c = CostMatrix::new(3, 2, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let a1 = hungarian(&c).unwrap();
        let a2 = hungarian(&c).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(a1.total_cost, 2.0);
        // All-equal costs: the scan keeps the first improvement, so the
        // lowest prediction indices win.
        assert_eq!(a1.prediction_for(0), Some(0));
        assert_eq!(a1.prediction_for(1), Some(1));
    }

    #[test]
    fn constant_shift_moves_cost_by_g_times_shift() {
        let mut rng = Rng::seeded(123);
        for _ in 0..50 {
            let g = 1 + rng.below(5) as usize;
            let n = g + rng.below(3) as usize;
            let costs: Vec<f64> = (0..n * g).map(|_| rng.uniform(0.0, 9.0)).collect();
            let shift = rng.uniform(-4.0, 4.0);
            let shifted: Vec<f64> = costs.iter().map(|v| v + shift).collect();
            let base = hungarian(&CostMatrix::new(n, g, costs).unwrap()).unwrap();
            let moved = hungarian(&CostMatrix::new(n, g, shifted).unwrap()).unwrap();
            assert!(
                (moved.total_cost - base.total_cost - g as f64 * shift).abs() < 1e-9,
                "shift invariance violated"
            );
        }
    }

    #[test]
    fn perfect_prediction_costs_minus_class_weight() {
        // Logits saturated on class 1 and an exactly matching box: the L1
        // and GIoU terms vanish and only the class reward remains.
        let logits = Tensor::new(vec![1, 4], vec![-1e3, 1e3, -1e3, -1e3]).unwrap();
        let boxes = Tensor::new(vec![1, 4], vec![0.5, 0.5, 0.2, 0.2]).unwrap();
        let gt = [BoxCxCyWH::new(0.5, 0.5, 0.2, 0.2)];
        let c = matching_cost(&logits, &boxes, &[1], &gt, CostWeights::default()).unwrap();
        assert!((c.at(0, 0) + 1.0).abs() < 1e-9, "{}", c.at(0, 0));
    }

    #[test]
    fn empty_ground_truth_yields_empty_cost_matrix() {
        let logits = Tensor::new(vec![2, 4], vec![0.0; 8]).unwrap();
        let boxes = Tensor::new(vec![2, 4], vec![0.25; 8]).unwrap();
        let c = matching_cost(&logits, &boxes, &[], &[], CostWeights::default()).unwrap();
        assert_eq!(c.cols(), 0);
        let a = hungarian(&c).unwrap();
        assert!(a.pairs.is_empty());
    }

    #[test]
    fn random_instance_matches_exhaustive_search() {
        let mut rng = Rng::seeded(7);
        let logits = Tensor::uniform(vec![5, 4], -2.0, 2.0, &mut rng);
        let boxes = Tensor::uniform(vec![5, 4], 0.2, 0.6, &mut rng);
        let gt_boxes: Vec<BoxCxCyWH> = (0..3)
            .map(|_| {
                BoxCxCyWH::new(
                    rng.uniform(0.3, 0.7),
                    rng.uniform(0.3, 0.7),
                    rng.uniform(0.1, 0.3),
                    rng.uniform(0.1, 0.3),
                )
            })
            .collect();
        let c = matching_cost(&logits, &boxes, &[0, 2, 1], &gt_boxes, CostWeights::default())
            .unwrap();
        let a = hungarian(&c).unwrap();
        assert!((a.total_cost - brute_force(&c)).abs() < 1e-9);
    }

    #[test]
    fn too_many_objects_rejected_by_cost_builder() {
        let logits = Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap();
        let boxes = Tensor::new(vec![1, 4], vec![0.5; 4]).unwrap();
        let gt = [BoxCxCyWH::new(0.5, 0.5, 0.1, 0.1); 2];
        assert!(matches!(
            matching_cost(&logits, &boxes, &[0, 1], &gt, CostWeights::default()),
            Err(Error::Contract(_))
        ));
    }
}
