use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Axis-aligned box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: usize,
    pub score: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, class_id: usize) -> Result<Self> {
        let b = BBox {
            cx,
            cy,
            w,
            h,
            class_id,
            score: 1.0,
        };
        b.check()?;
        Ok(b)
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn check(&self) -> Result<()> {
        if !(self.w > 0.0 && self.h > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::DegenerateBox { w: self.w, h: self.h });
        }
        Ok(())
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize) -> Result<Self> {
        BBox::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1, class_id)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Intersection with the unit square. `None` if nothing is left.
    pub fn clamped(&self) -> Option<BBox> {
        let [x1, y1, x2, y2] = self.corners();
        let (x1, y1, x2, y2) = (x1.max(0.0), y1.max(0.0), x2.min(1.0), y2.min(1.0));
        BBox::from_corners(x1, y1, x2, y2, self.class_id)
            .ok()
            .map(|b| b.with_score(self.score))
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    /// Uniform scaling about `(ox, oy)`.
    pub fn scaled_about(&self, ox: f64, oy: f64, s: f64) -> BBox {
        BBox {
            cx: ox + (self.cx - ox) * s,
            cy: oy + (self.cy - oy) * s,
            w: self.w * s,
            h: self.h * s,
            ..*self
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

/// Aspect-ratio consistency term `4/pi^2 (atan(w_t/h_t) - atan(w_p/h_p))^2`.
fn aspect_term(pred: &BBox, target: &BBox) -> f64 {
    let d = (target.w / target.h).atan() - (pred.w / pred.h).atan();
    4.0 / (PI * PI) * d * d
}

/// `1 - IoU + rho^2 / c^2 + alpha v`.
pub fn ciou_loss(pred: &BBox, target: &BBox) -> Result<f64> {
    pred.check()?;
    target.check()?;
    let iou = iou(pred, target);
    let [px1, py1, px2, py2] = pred.corners();
    let [tx1, ty1, tx2, ty2] = target.corners();
    let cw = px2.max(tx2) - px1.min(tx1);
    let ch = py2.max(ty2) - py1.min(ty1);
    let rho2 = (pred.cx - target.cx).powi(2) + (pred.cy - target.cy).powi(2);
    let v = aspect_term(pred, target);
    let alpha = if v == 0.0 { 0.0 } else { v / ((1.0 - iou) + v) };
    Ok(1.0 - iou + rho2 / (cw * cw + ch * ch) + alpha * v)
}

/// Predicted boxes as tape vectors, each `(1, 1, 1, n)`.
#[derive(Clone, Copy, Debug)]
pub struct BoxVars<'t> {
    pub cx: Var<'t>,
    pub cy: Var<'t>,
    pub w: Var<'t>,
    pub h: Var<'t>,
}

impl<'t> BoxVars<'t> {
    pub fn len(&self) -> usize {
        self.cx.shape().numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Current values as plain boxes.
    pub fn boxes(&self) -> Vec<BBox> {
        let (cx, cy, w, h) = (self.cx.value(), self.cy.value(), self.w.value(), self.h.value());
        (0..self.len())
            .map(|i| BBox {
                cx: cx.data()[i],
                cy: cy.data()[i],
                w: w.data()[i],
                h: h.data()[i],
                class_id: 0,
                score: 1.0,
            })
            .collect()
    }
}

/// Per-box CIoU on the tape, with `alpha` held constant. `alpha` is taken
/// from `fixed_alpha` when given and computed from the current boxes
/// otherwise. Returns the `(1, 1, 1, n)` loss vector, the IoU of each pair
/// and the alpha used.
pub fn ciou_loss_var<'t>(
    pred: &BoxVars<'t>,
    targets: &[BBox],
    fixed_alpha: Option<&[f64]>,
) -> Result<(Var<'t>, Vec<f64>, Vec<f64>)> {
    let n = pred.len();
    if targets.len() != n {
        return Err(Error::InvalidArgument(format!("{} predictions vs {} targets", n, targets.len())));
    }
    for t in targets {
        t.check()?;
    }
    let plain = pred.boxes();
    for b in &plain {
        b.check()?;
    }
    let tape = pred.cx.tape();
    let vec = |f: &dyn Fn(&BBox) -> f64| {
        let data = targets.iter().map(f).collect();
        tape.constant(Tensor::new(Shape::new(1, 1, 1, n), data).expect("length checked"))
    };
    let [tx1, ty1, tx2, ty2] = [0, 1, 2, 3].map(|k| vec(&|b: &BBox| b.corners()[k]));
    let (tcx, tcy) = (vec(&|b| b.cx), vec(&|b| b.cy));

    let half_w = pred.w.scale(0.5);
    let half_h = pred.h.scale(0.5);
    let px1 = pred.cx.sub(half_w)?;
    let px2 = pred.cx.add(half_w)?;
    let py1 = pred.cy.sub(half_h)?;
    let py2 = pred.cy.add(half_h)?;

    let iw = px2.minimum(tx2)?.sub(px1.maximum(tx1)?)?.relu();
    let ih = py2.minimum(ty2)?.sub(py1.maximum(ty1)?)?.relu();
    let inter = iw.mul(ih)?;
    let t_area = vec(&|b| b.area());
    let union = pred.w.mul(pred.h)?.add(t_area)?.sub(inter)?;
    let iou = inter.div(union)?;

    let cw = px2.maximum(tx2)?.sub(px1.minimum(tx1)?)?;
    let ch = py2.maximum(ty2)?.sub(py1.minimum(ty1)?)?;
    let c2 = cw.square().add(ch.square())?;
    let rho2 = pred.cx.sub(tcx)?.square().add(pred.cy.sub(tcy)?.square())?;

    let t_atan = vec(&|b| (b.w / b.h).atan());
    let d = t_atan.sub(pred.w.div(pred.h)?.atan())?;
    let v = d.square().scale(4.0 / (PI * PI));

    let iou_vals: Vec<f64> = iou.value().data().to_vec();
    let alpha: Vec<f64> = match fixed_alpha {
        Some(a) if a.len() == n => a.to_vec(),
        Some(a) => return Err(Error::InvalidArgument(format!("{} fixed alphas for {n} boxes", a.len()))),
        None => iou_vals
            .iter()
            .zip(v.value().data())
            .map(|(&iou, &v)| if v == 0.0 { 0.0 } else { v / ((1.0 - iou) + v) })
            .collect(),
    };
    let alpha_var = tape.constant(Tensor::new(Shape::new(1, 1, 1, n), alpha.clone())?);

    let loss = iou
        .scale(-1.0)
        .add_scalar(1.0)
        .add(rho2.div(c2)?)?
        .add(alpha_var.mul(v)?)?;
    Ok((loss, iou_vals, alpha))
}
