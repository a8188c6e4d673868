//! Central-difference gradient checking used across the unit tests and the
//! `gradcheck` command.

use super::{Param, Tape, Var};
use crate::error::{Error, Result};

pub const STEP: f64 = 1e-5;

/// One-sided slopes disagreeing by more than this (relative) mark a
/// coordinate as sitting on a kink (relu, abs, a matching tie), where finite
/// differences are meaningless.
const KINK_TOLERANCE: f64 = 1e-3;

/// At most this fraction of coordinates may be skipped as kinks; more means
/// the check is no longer covering the function.
const MAX_SKIP_FRACTION: f64 = 0.05;

/// Relative error with an absolute floor, so near-zero gradients compare on
/// an absolute scale instead of blowing up.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference of `loss_fn` with respect to every element of every
/// parameter, compared against the tape gradient. Returns the worst relative
/// error across all coordinates.
///
/// Coordinates whose one-sided slopes disagree (the probe straddles a kink)
/// are excluded, capped at [`MAX_SKIP_FRACTION`] of the total so a broken
/// backward pass cannot hide behind the filter.
///
/// `loss_fn` must rebuild the graph from scratch on the tape it is given;
/// the closure is invoked 2·numel + 2 times.
pub fn check_params(
    params: &[Param],
    loss_fn: impl Fn(&Tape) -> Result<Var>,
) -> Result<f64> {
    super::zero_grads(params);
    let tape = Tape::new();
    let loss = loss_fn(&tape)?;
    tape.backward(loss)?;
    let grads: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.borrow().grad.clone().expect("param missing gradient"))
        .collect();
    let mid = eval(&loss_fn)?;

    let mut worst = 0.0_f64;
    let mut skipped = 0usize;
    let total: usize = params.iter().map(Param::numel).sum();
    for (p, grad) in params.iter().zip(&grads) {
        for i in 0..p.numel() {
            let orig = p.borrow().values()[i];

            p.borrow_mut().values_mut()[i] = orig + STEP;
            let up = eval(&loss_fn)?;
            p.borrow_mut().values_mut()[i] = orig - STEP;
            let down = eval(&loss_fn)?;
            p.borrow_mut().values_mut()[i] = orig;

            let up_slope = (up - mid) / STEP;
            let down_slope = (mid - down) / STEP;
            let scale = up_slope.abs().max(down_slope.abs()).max(1.0);
            if (up_slope - down_slope).abs() > KINK_TOLERANCE * scale {
                skipped += 1;
                continue;
            }

            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(grad[i], numeric));
        }
    }
    if skipped as f64 > (MAX_SKIP_FRACTION * total as f64).max(1.0) {
        return Err(Error::Metric(format!(
            "{skipped} of {total} coordinates sit on kinks; the check lost coverage"
        )));
    }
    Ok(worst)
}

fn eval(loss_fn: &impl Fn(&Tape) -> Result<Var>) -> Result<f64> {
    let tape = Tape::new();
    let loss = loss_fn(&tape)?;
    tape.scalar_of(loss)
}
