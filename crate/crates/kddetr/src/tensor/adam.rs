use super::Param;
use crate::error::{Error, Result};

/// Gradient magnitudes at or below this are float rounding residue, not
/// signal (real gradients in this codebase bottom out around 1e-7). They are
/// flushed to exact zero before the moment update so that a parameter sitting
/// at a loss minimum stays bitwise unchanged: the scale-free update would
/// otherwise turn residue of any size into lr-scale steps.
const GRAD_NOISE_FLOOR: f64 = 1e-12;

/// Adam with bias correction. Moment buffers are keyed by position in the
/// parameter list, so every `step` must receive the same parameters in the
/// same order.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &[Param]) -> Result<()> {
        if self.m.is_empty() {
            for p in params {
                let n = p.numel();
                self.m.push(vec![0.0; n]);
                self.v.push(vec![0.0; n]);
            }
        } else if self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer holds state for {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter().enumerate() {
            let mut t = p.borrow_mut();
            let grad = match t.grad.take() {
                Some(g) => g,
                None => {
                    return Err(Error::Contract(format!(
                        "parameter {:?} has no gradient; run backward first",
                        p.name()
                    )))
                }
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((x, g), (mi, vi)) in t
                .values_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = if g.abs() <= GRAD_NOISE_FLOOR { 0.0 } else { *g };
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Resets every parameter's gradient to zeros (allocating if absent), so a
/// fresh backward pass accumulates from a clean slate and parameters left
/// untouched by the loss still satisfy the optimizer's gradient contract.
pub fn zero_grads(params: &[Param]) {
    for p in params {
        p.borrow_mut().zero_grad();
    }
}
