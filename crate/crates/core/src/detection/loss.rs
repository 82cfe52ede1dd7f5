use serde::{Deserialize, Serialize};

use super::boxes::{ciou_loss_var, BoxVars};
use super::head::{HeadLayout, CLASS_CHANNEL, OBJ_CHANNEL};
use super::BBox;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarifocalParams {
    pub alpha: f64,
    pub gamma: f64,
    /// Scores are clamped to `[eps, 1 - eps]`.
    pub eps: f64,
}

impl Default for VarifocalParams {
    fn default() -> Self {
        VarifocalParams {
            alpha: 0.75,
            gamma: 2.0,
            eps: 1e-7,
        }
    }
}

/// `q > 0`: `-q (q ln p + (1 - q) ln(1 - p))`; `q == 0`: `-alpha p^gamma ln(1 - p)`.
pub fn varifocal_loss(p: f64, q: f64, vf: &VarifocalParams) -> f64 {
    let p = p.clamp(vf.eps, 1.0 - vf.eps);
    if q > 0.0 {
        -q * (q * p.ln() + (1.0 - q) * (1.0 - p).ln())
    } else {
        -vf.alpha * p.powf(vf.gamma) * (1.0 - p).ln()
    }
}

/// Summed varifocal loss of the score vector `p` against constant targets.
pub fn varifocal_loss_var<'t>(p: Var<'t>, q: &[f64], vf: &VarifocalParams) -> Result<Var<'t>> {
    let n = p.shape().numel();
    if q.len() != n {
        return Err(Error::InvalidArgument(format!("{n} scores vs {} targets", q.len())));
    }
    let tape = p.tape();
    let shape = p.shape();
    let coef = |f: &dyn Fn(f64) -> f64| tape.constant(Tensor::new(shape, q.iter().map(|&q| f(q)).collect()).expect("length checked"));
    let p = p.clamp(vf.eps, 1.0 - vf.eps);
    let ln_p = p.ln();
    let ln_1mp = p.scale(-1.0).add_scalar(1.0).ln();
    let pos_p = coef(&|q| if q > 0.0 { q * q } else { 0.0 });
    let pos_1mp = coef(&|q| if q > 0.0 { q * (1.0 - q) } else { 0.0 });
    let neg = coef(&|q| if q > 0.0 { 0.0 } else { vf.alpha });
    let pos = pos_p.mul(ln_p)?.add(pos_1mp.mul(ln_1mp)?)?;
    let p_gamma = ln_p.scale(vf.gamma).exp();
    let negs = neg.mul(p_gamma)?.mul(ln_1mp)?;
    Ok(pos.add(negs)?.sum().scale(-1.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_box: f64,
    pub l_cls: f64,
    pub l_obj: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_box: f64, l_cls: f64, l_obj: f64) -> Self {
        LossBreakdown {
            l_box,
            l_cls,
            l_obj,
            total: l_box + l_cls + l_obj,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_box, self.l_cls, self.l_obj, self.total].iter().all(|v| v.is_finite())
    }
}

/// One truth box and the cell it was assigned to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assignment {
    pub image: usize,
    pub row: usize,
    pub col: usize,
    pub target: BBox,
}

/// Center-cell assignment: each box goes to the cell holding its center.
/// When two boxes share a cell the first one keeps it.
pub fn assign(layout: &HeadLayout, truth: &[Vec<BBox>]) -> Vec<Assignment> {
    let mut out: Vec<Assignment> = Vec::new();
    for (image, boxes) in truth.iter().enumerate() {
        for b in boxes {
            let (row, col) = layout.cell_of(b);
            if out.iter().any(|a| a.image == image && a.row == row && a.col == col) {
                continue;
            }
            out.push(Assignment {
                image,
                row,
                col,
                target: *b,
            });
        }
    }
    out
}

/// Decoded boxes at the given cells, on the tape.
pub fn decode_at<'t>(layout: &HeadLayout, out: Var<'t>, cells: &[Assignment]) -> Result<BoxVars<'t>> {
    let g = layout.grid as f64;
    let tape = out.tape();
    let pick = |c: usize| out.gather(cells.iter().map(|a| layout.index(a.image, c, a.row, a.col)).collect());
    let offsets = |f: &dyn Fn(&Assignment) -> usize| {
        let data = cells.iter().map(|a| f(a) as f64).collect();
        tape.constant(Tensor::new(Shape::new(1, 1, 1, cells.len()), data).expect("length checked"))
    };
    let cx = pick(0)?.sigmoid().add(offsets(&|a| a.col))?.scale(1.0 / g);
    let cy = pick(1)?.sigmoid().add(offsets(&|a| a.row))?.scale(1.0 / g);
    let w = pick(2)?.exp().scale(layout.prior);
    let h = pick(3)?.exp().scale(layout.prior);
    Ok(BoxVars { cx, cy, w, h })
}

/// The stop-gradient quantities of [`detection_loss`]: objectness targets
/// per cell and the CIoU `alpha` per assigned cell.
#[derive(Clone, Debug, PartialEq)]
pub struct DetachedTerms {
    pub obj_target: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// Unit-weight sum `l_box + l_cls + l_obj`.
///
/// `l_box` is the mean CIoU over assigned cells. `l_obj` is varifocal over
/// every cell with the detached IoU as the positive target; `l_cls` is
/// varifocal over the class logits of assigned cells with one-hot targets.
/// Both are normalized by `max(positives, 1)`.
pub fn detection_loss<'t>(
    layout: &HeadLayout,
    out: Var<'t>,
    truth: &[Vec<BBox>],
    vf: &VarifocalParams,
) -> Result<(Var<'t>, LossBreakdown)> {
    detection_loss_with(layout, out, truth, vf, None).map(|(v, b, _)| (v, b))
}

/// [`detection_loss`] with the detached terms optionally supplied instead
/// of computed. Holding them fixed turns the loss into the function whose
/// gradient backward actually returns, which is what a finite-difference
/// check needs.
pub fn detection_loss_with<'t>(
    layout: &HeadLayout,
    out: Var<'t>,
    truth: &[Vec<BBox>],
    vf: &VarifocalParams,
    fixed: Option<&DetachedTerms>,
) -> Result<(Var<'t>, LossBreakdown, DetachedTerms)> {
    let value = out.value();
    layout.check_output(&value)?;
    let batch = value.shape().n();
    if truth.len() != batch {
        return Err(Error::InvalidArgument(format!("{} truth sets for batch {batch}", truth.len())));
    }
    let tape = out.tape();
    let cells = assign(layout, truth);
    let npos = cells.len();
    let norm = 1.0 / npos.max(1) as f64;
    let g = layout.grid;

    let mut obj_idx = Vec::with_capacity(batch * g * g);
    for n in 0..batch {
        for row in 0..g {
            for col in 0..g {
                obj_idx.push(layout.index(n, OBJ_CHANNEL, row, col));
            }
        }
    }
    let p_obj = out.gather(obj_idx)?.sigmoid();
    let mut q_obj = vec![0.0; batch * g * g];
    let mut alpha = Vec::new();
    for a in &cells {
        if a.target.class_id >= layout.classes {
            return Err(Error::InvalidArgument(format!(
                "class {} out of range for {} classes",
                a.target.class_id, layout.classes
            )));
        }
    }

    let (l_box, l_cls) = if npos == 0 {
        (tape.constant(Tensor::scalar(0.0)), tape.constant(Tensor::scalar(0.0)))
    } else {
        let pred = decode_at(layout, out, &cells)?;
        let targets: Vec<BBox> = cells.iter().map(|a| a.target).collect();
        let (ciou, ious, used_alpha) = ciou_loss_var(&pred, &targets, fixed.map(|f| f.alpha.as_slice()))?;
        alpha = used_alpha;
        for (a, iou) in cells.iter().zip(ious) {
            q_obj[(a.image * g + a.row) * g + a.col] = iou.max(0.0);
        }
        let mut cls_idx = Vec::with_capacity(npos * layout.classes);
        let mut cls_q = Vec::with_capacity(npos * layout.classes);
        for a in &cells {
            for k in 0..layout.classes {
                cls_idx.push(layout.index(a.image, CLASS_CHANNEL + k, a.row, a.col));
                cls_q.push(if k == a.target.class_id { 1.0 } else { 0.0 });
            }
        }
        let l_cls = if cls_idx.is_empty() {
            tape.constant(Tensor::scalar(0.0))
        } else {
            varifocal_loss_var(out.gather(cls_idx)?.sigmoid(), &cls_q, vf)?.scale(norm)
        };
        (ciou.sum().scale(norm), l_cls)
    };
    if let Some(f) = fixed {
        if f.obj_target.len() != q_obj.len() {
            return Err(Error::InvalidArgument("fixed objectness targets do not match the grid".into()));
        }
        q_obj.clone_from(&f.obj_target);
    }
    let l_obj = varifocal_loss_var(p_obj, &q_obj, vf)?.scale(norm);
    let total = l_box.add(l_cls)?.add(l_obj)?;
    let item = |v: Var<'t>| v.value().data()[0];
    let breakdown = LossBreakdown {
        l_box: item(l_box),
        l_cls: item(l_cls),
        l_obj: item(l_obj),
        total: item(total),
    };
    let detached = DetachedTerms { obj_target: q_obj, alpha };
    Ok((total, breakdown, detached))
}
