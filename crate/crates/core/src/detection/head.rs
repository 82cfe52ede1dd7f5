use serde::{Deserialize, Serialize};

use super::BBox;
use crate::error::{Error, Result};
use crate::tensor::{sigmoid_scalar, Tensor};

/// Channel layout and box parameterization of the dense head output
/// `(B, 5 + K, G, G)`: `tx, ty, tw, th, obj, cls_0 .. cls_{K-1}`.
///
/// `cx = (j + sigmoid(tx)) / G`, `w = prior * exp(tw)`, and likewise for `y`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub classes: usize,
    pub grid: usize,
    /// Box size, as a fraction of the image, at `tw = th = 0`.
    pub prior: f64,
}

pub const OBJ_CHANNEL: usize = 4;
pub const CLASS_CHANNEL: usize = 5;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl HeadLayout {
    pub fn channels(&self) -> usize {
        5 + self.classes
    }

    /// Cell `(row, col)` containing the center of `b`.
    pub fn cell_of(&self, b: &BBox) -> (usize, usize) {
        let g = self.grid as f64;
        let pick = |v: f64| ((v * g).floor().max(0.0) as usize).min(self.grid - 1);
        (pick(b.cy), pick(b.cx))
    }

    pub fn decode_raw(&self, raw: [f64; 4], row: usize, col: usize) -> (f64, f64, f64, f64) {
        let g = self.grid as f64;
        (
            (col as f64 + sigmoid_scalar(raw[0])) / g,
            (row as f64 + sigmoid_scalar(raw[1])) / g,
            self.prior * raw[2].exp(),
            self.prior * raw[3].exp(),
        )
    }

    /// Inverse of [`HeadLayout::decode_raw`] for the cell holding the center.
    pub fn encode(&self, b: &BBox) -> Result<([f64; 4], (usize, usize))> {
        b.check()?;
        let g = self.grid as f64;
        let (row, col) = self.cell_of(b);
        let fx = b.cx * g - col as f64;
        let fy = b.cy * g - row as f64;
        if !(fx > 0.0 && fx < 1.0 && fy > 0.0 && fy < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "box center ({}, {}) lies on a cell boundary or outside the image",
                b.cx, b.cy
            )));
        }
        Ok((
            [logit(fx), logit(fy), (b.w / self.prior).ln(), (b.h / self.prior).ln()],
            (row, col),
        ))
    }

    /// Flat index of `(n, channel, row, col)` in a head output.
    pub fn index(&self, n: usize, channel: usize, row: usize, col: usize) -> usize {
        ((n * self.channels() + channel) * self.grid + row) * self.grid + col
    }

    pub fn check_output(&self, out: &Tensor) -> Result<()> {
        let s = out.shape();
        if s.c() != self.channels() || s.h() != self.grid || s.w() != self.grid {
            return Err(Error::Dimension {
                op: "head",
                msg: format!("expected (N, {}, {g}, {g}), got {s}", self.channels(), g = self.grid),
            });
        }
        Ok(())
    }

    /// Every cell as a scored box, clamped to the image. Score is
    /// `sigmoid(obj)`; the class is the arg-max logit.
    pub fn decode(&self, out: &Tensor) -> Result<Vec<Vec<BBox>>> {
        self.check_output(out)?;
        let d = out.data();
        let mut all = Vec::with_capacity(out.shape().n());
        for n in 0..out.shape().n() {
            let mut boxes = Vec::new();
            for row in 0..self.grid {
                for col in 0..self.grid {
                    let at = |c: usize| d[self.index(n, c, row, col)];
                    let (cx, cy, w, h) = self.decode_raw([at(0), at(1), at(2), at(3)], row, col);
                    let class_id = (0..self.classes)
                        .max_by(|&a, &b| at(CLASS_CHANNEL + a).total_cmp(&at(CLASS_CHANNEL + b)))
                        .unwrap_or(0);
                    let b = BBox {
                        cx,
                        cy,
                        w,
                        h,
                        class_id,
                        score: sigmoid_scalar(at(OBJ_CHANNEL)),
                    };
                    if let Some(b) = b.clamped() {
                        boxes.push(b);
                    }
                }
            }
            all.push(boxes);
        }
        Ok(all)
    }
}
