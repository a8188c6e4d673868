//! Dense 64-bit tensors with reverse-mode automatic differentiation.
//!
//! The design is a dynamic tape: every forward operation appends a node to a
//! [`Tape`], and [`Tape::backward`] walks the nodes in exact reverse
//! construction order. Model parameters live outside the tape as shared
//! [`Param`] cells; binding one onto a tape copies its current values in and
//! routes gradients back out when the tape is differentiated.

mod adam;
pub mod fdcheck;
mod tape;

pub use adam::{zero_grads, Adam};
pub use tape::{Tape, Var};

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense multi-dimensional array of 64-bit reals in row-major order, with an
/// optional gradient buffer of the same length.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            // Zero-sized tensors are legal only as the empty G=0 edge case.
            if !values.is_empty() {
                return Err(Error::Contract(format!(
                    "zero-sized shape {shape:?} with {} values",
                    values.len()
                )));
            }
        } else if numel != values.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} wants {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![v; numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// Elementwise i.i.d. uniform on `[lo, hi)`.
    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let numel = shape.iter().product();
        let values = (0..numel).map(|_| rng.uniform(lo, hi)).collect();
        Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// Number of rows when viewed as a 2-D matrix (leading axis).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Row length of the last axis.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.last_dim();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Resets the gradient buffer to zeros, allocating it if absent.
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.values.len()]),
        }
    }

    /// Little-endian byte image of the values, for hashing and checkpoints.
    pub fn value_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// A named, shared, trainable tensor. Cloning a `Param` clones the handle,
/// not the storage; the optimizer and every tape binding see the same cell.
#[derive(Clone)]
pub struct Param {
    name: String,
    cell: Rc<RefCell<Tensor>>,
}

impl Param {
    pub fn new(name: impl Into<String>, mut tensor: Tensor) -> Self {
        tensor.requires_grad = true;
        Param {
            name: name.into(),
            cell: Rc::new(RefCell::new(tensor)),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn borrow(&self) -> Ref<'_, Tensor> {
        self.cell.borrow()
    }

    pub fn borrow_mut(&self) -> RefMut<'_, Tensor> {
        self.cell.borrow_mut()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.cell.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.cell.borrow().numel()
    }

    /// Detached copy of the current values.
    pub fn snapshot(&self) -> Tensor {
        let t = self.cell.borrow();
        let mut copy = t.clone();
        copy.requires_grad = false;
        copy.grad = None;
        copy
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut t = self.cell.borrow_mut();
        if t.grad.is_none() {
            t.grad = Some(vec![0.0; t.numel()]);
        }
        let g = t.grad.as_mut().unwrap();
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({}, shape {:?})", self.name, self.shape())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn param_handles_share_storage() {
        let p = Param::new("w", Tensor::zeros(vec![2]));
        let q = p.clone();
        p.borrow_mut().values_mut()[0] = 5.0;
        assert_eq!(q.borrow().values()[0], 5.0);
    }

    #[test]
    fn snapshot_is_detached() {
        let p = Param::new("w", Tensor::full(vec![2], 1.0));
        let snap = p.snapshot();
        p.borrow_mut().values_mut()[0] = 9.0;
        assert_eq!(snap.values(), &[1.0, 1.0]);
        assert!(!snap.requires_grad);
    }
}
