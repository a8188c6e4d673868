//! Axis-aligned boxes in normalized image coordinates, with IoU and
//! generalized IoU in two forms: exact scalar functions used by matching and
//! evaluation, and a tape composition used inside differentiable losses.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Center-size parameterization; the native output format of the box head.
/// Coordinates are fractions of the image, so a valid box has every field in
/// [0, 1] and non-negative extent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCxCyWH {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner parameterization used for overlap math. Invariant: x1 ≤ x2 and
/// y1 ≤ y2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxXYXY {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxCxCyWH {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoxCxCyWH { cx, cy, w, h }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        BoxCxCyWH::new(v[0], v[1], v[2], v[3])
    }
}

impl BoxXYXY {
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }
}

pub fn cxcywh_to_xyxy(b: BoxCxCyWH) -> BoxXYXY {
    BoxXYXY {
        x1: b.cx - b.w / 2.0,
        y1: b.cy - b.h / 2.0,
        x2: b.cx + b.w / 2.0,
        y2: b.cy + b.h / 2.0,
    }
}

pub fn xyxy_to_cxcywh(b: BoxXYXY) -> BoxCxCyWH {
    BoxCxCyWH {
        cx: (b.x1 + b.x2) / 2.0,
        cy: (b.y1 + b.y2) / 2.0,
        w: b.x2 - b.x1,
        h: b.y2 - b.y1,
    }
}

/// Intersection-over-union. Returns 0 when the union has zero area.
pub fn iou(a: BoxXYXY, b: BoxXYXY) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `iou − (enclosing − union) / enclosing`, always in
/// [−1, 1]. Returns 0 by convention when the smallest enclosing box has zero
/// area (both inputs are the same degenerate point).
pub fn giou(a: BoxXYXY, b: BoxXYXY) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let enc = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    if enc <= 0.0 {
        return 0.0;
    }
    let i = if union <= 0.0 { 0.0 } else { inter / union };
    i - (enc - union) / enc
}

/// Constant conversion matrix: right-multiplying `[n,4]` center-size rows by
/// it yields corner form. Row order matches (cx, cy, w, h) → (x1, y1, x2, y2).
fn conversion_matrix(tape: &Tape) -> Var {
    tape.constant(
        Tensor::new(
            vec![4, 4],
            vec![
                1.0, 0.0, 1.0, 0.0, //
                0.0, 1.0, 0.0, 1.0, //
                -0.5, 0.0, 0.5, 0.0, //
                0.0, -0.5, 0.0, 0.5,
            ],
        )
        .expect("static shape"),
    )
}

/// Center-size rows `[n,4]` to corner rows `[n,4]` on the tape.
pub fn to_xyxy_on_tape(tape: &Tape, cxcywh: Var) -> Result<Var> {
    tape.matmul(cxcywh, conversion_matrix(tape))
}

fn column(tape: &Tape, m: Var, j: usize) -> Result<Var> {
    let mut sel = vec![0.0; 4];
    sel[j] = 1.0;
    let e = tape.constant(Tensor::new(vec![4, 1], sel).expect("static shape"));
    tape.matmul(m, e)
}

fn vmax(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    // max(a,b) = a + relu(b − a); routes the gradient to whichever side wins.
    let d = tape.sub(b, a)?;
    tape.add(a, tape.relu(d))
}

fn vmin(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    tape.sub(a, tape.relu(d))
}

/// Pairwise GIoU of two `[n,4]` corner-form stacks, row i against row i.
/// Output is `[n,1]`. Denominators carry a tiny epsilon so degenerate boxes
/// stay finite; the scalar [`giou`] is the exact reference.
pub fn giou_on_tape(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    let (ax1, ay1, ax2, ay2) = (
        column(tape, a, 0)?,
        column(tape, a, 1)?,
        column(tape, a, 2)?,
        column(tape, a, 3)?,
    );
    let (bx1, by1, bx2, by2) = (
        column(tape, b, 0)?,
        column(tape, b, 1)?,
        column(tape, b, 2)?,
        column(tape, b, 3)?,
    );

    let iw = tape.relu(tape.sub(vmin(tape, ax2, bx2)?, vmax(tape, ax1, bx1)?)?);
    let ih = tape.relu(tape.sub(vmin(tape, ay2, by2)?, vmax(tape, ay1, by1)?)?);
    let inter = tape.mul(iw, ih)?;

    let area_a = tape.mul(tape.sub(ax2, ax1)?, tape.sub(ay2, ay1)?)?;
    let area_b = tape.mul(tape.sub(bx2, bx1)?, tape.sub(by2, by1)?)?;
    let union = tape.sub(tape.add(area_a, area_b)?, inter)?;

    let ew = tape.sub(vmax(tape, ax2, bx2)?, vmin(tape, ax1, bx1)?)?;
    let eh = tape.sub(vmax(tape, ay2, by2)?, vmin(tape, ay1, by1)?)?;
    let enc = tape.mul(ew, eh)?;

    let iou = tape.div(inter, tape.affine(union, 1.0, 1e-12))?;
    let gap = tape.div(tape.sub(enc, union)?, tape.affine(enc, 1.0, 1e-12))?;
    tape.sub(iou, gap)
}
