//! Convolutions (standard, dilated, depthwise, pointwise, deformable) and
//! batch normalization, with the backward kernels the tape calls into.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvKind {
    Standard,
    Dilated,
    Depthwise,
    Deformable,
    Pointwise,
}

/// Layer configuration. Padding is always "same": `dilation * (kernel - 1) / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kind: ConvKind,
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    fn base(kind: ConvKind, cin: usize, cout: usize, kernel: usize) -> Self {
        ConvSpec {
            kind,
            kernel,
            dilation: 1,
            stride: 1,
            in_channels: cin,
            out_channels: cout,
            has_bias: true,
        }
    }
    pub fn standard(cin: usize, cout: usize, kernel: usize) -> Self {
        Self::base(ConvKind::Standard, cin, cout, kernel)
    }
    pub fn dilated(cin: usize, cout: usize, kernel: usize, dilation: usize) -> Self {
        ConvSpec {
            dilation,
            ..Self::base(ConvKind::Dilated, cin, cout, kernel)
        }
    }
    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        Self::base(ConvKind::Depthwise, channels, channels, kernel)
    }
    pub fn pointwise(cin: usize, cout: usize) -> Self {
        Self::base(ConvKind::Pointwise, cin, cout, 1)
    }
    pub fn deformable(cin: usize, cout: usize, kernel: usize) -> Self {
        Self::base(ConvKind::Deformable, cin, cout, kernel)
    }
    pub fn with_stride(self, stride: usize) -> Self {
        ConvSpec { stride, ..self }
    }
    pub fn without_bias(self) -> Self {
        ConvSpec {
            has_bias: false,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("conv spec: {msg}")));
        if self.kernel % 2 == 0 {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        if self.dilation == 0 || self.stride == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return bad("dilation, stride and channel counts must be positive".into());
        }
        if self.kind == ConvKind::Depthwise && self.in_channels != self.out_channels {
            return bad("depthwise needs in == out channels".into());
        }
        if self.kind == ConvKind::Pointwise && self.kernel != 1 {
            return bad("pointwise needs kernel 1".into());
        }
        Ok(())
    }

    pub fn groups(&self) -> usize {
        if self.kind == ConvKind::Depthwise {
            self.in_channels
        } else {
            1
        }
    }

    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_channels / self.groups(),
            self.kernel,
            self.kernel,
        )
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            stride: self.stride,
            padding: self.padding(),
            dilation: self.dilation,
            groups: self.groups(),
        }
    }
}

/// The index arithmetic shared by every convolution kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn out_len(&self, len: usize, kernel: usize) -> usize {
        (len + 2 * self.padding - self.dilation * (kernel - 1) - 1) / self.stride + 1
    }

    /// Output positions `o` whose tap `t` reads an in-bounds input `o*s + t*d - p`.
    #[inline]
    fn valid_range(&self, tap: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let off = (tap * self.dilation) as isize - self.padding as isize;
        let s = self.stride as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= in_len - 1
        let top = in_len as isize - 1 - off;
        if top < 0 {
            return (0, 0);
        }
        let hi = (top / s + 1).min(out_len as isize);
        (lo as usize, hi.max(lo) as usize)
    }

    fn check(&self, x: Shape, w: Shape) -> Result<(usize, usize)> {
        if w.h() % 2 == 0 || w.h() != w.w() {
            return Err(Error::Dimension {
                op: "conv2d",
                msg: format!("kernel must be square and odd, got {w}"),
            });
        }
        if x.c() % self.groups != 0 || w.n() % self.groups != 0 || w.c() * self.groups != x.c() {
            return Err(Error::Dimension {
                op: "conv2d",
                msg: format!("input {x} incompatible with weight {w} for {} groups", self.groups),
            });
        }
        let k = w.h();
        if x.h() + 2 * self.padding < self.dilation * (k - 1) + 1
            || x.w() + 2 * self.padding < self.dilation * (k - 1) + 1
        {
            return Err(Error::Dimension {
                op: "conv2d",
                msg: format!("input {x} smaller than dilated kernel"),
            });
        }
        Ok((self.out_len(x.h(), k), self.out_len(x.w(), k)))
    }
}

fn check_bias(bias: Option<&[f64]>, cout: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != cout => Err(Error::Dimension {
            op: "conv2d",
            msg: format!("bias length {} for {cout} output channels", b.len()),
        }),
        _ => Ok(()),
    }
}

/// Unfolds one `(group, image)` slice into `cols[(ic * k + ky) * k + kx][oy * ow + ox]`,
/// zero where the tap falls into padding. 1x1 unit-stride kernels without
/// padding read the input directly.
fn im2col<'a>(src: &'a [f64], cin_g: usize, h: usize, w: usize, k: usize, oh: usize, ow: usize, geo: ConvGeometry, buf: &'a mut Vec<f64>) -> &'a [f64] {
    if k == 1 && geo.stride == 1 && geo.padding == 0 {
        return src;
    }
    let ohw = oh * ow;
    buf.clear();
    buf.resize(cin_g * k * k * ohw, 0.0);
    for ic in 0..cin_g {
        let plane = &src[ic * h * w..(ic + 1) * h * w];
        for ky in 0..k {
            let (y0, y1) = geo.valid_range(ky, h, oh);
            for kx in 0..k {
                let (x0, x1) = geo.valid_range(kx, w, ow);
                let row = &mut buf[((ic * k + ky) * k + kx) * ohw..][..ohw];
                for oy in y0..y1 {
                    let iy = oy * geo.stride + ky * geo.dilation - geo.padding;
                    let irow = &plane[iy * w..(iy + 1) * w];
                    let orow = &mut row[oy * ow..(oy + 1) * ow];
                    if geo.stride == 1 {
                        if x1 > x0 {
                            let start = x0 + kx * geo.dilation - geo.padding;
                            orow[x0..x1].copy_from_slice(&irow[start..start + x1 - x0]);
                        }
                    } else {
                        for ox in x0..x1 {
                            orow[ox] = irow[ox * geo.stride + kx * geo.dilation - geo.padding];
                        }
                    }
                }
            }
        }
    }
    buf
}

/// Adjoint of [`im2col`]: accumulates `cols` back into the input plane.
fn col2im(cols: &[f64], dst: &mut [f64], cin_g: usize, h: usize, w: usize, k: usize, oh: usize, ow: usize, geo: ConvGeometry) {
    let ohw = oh * ow;
    for ic in 0..cin_g {
        let plane = &mut dst[ic * h * w..(ic + 1) * h * w];
        for ky in 0..k {
            let (y0, y1) = geo.valid_range(ky, h, oh);
            for kx in 0..k {
                let (x0, x1) = geo.valid_range(kx, w, ow);
                let row = &cols[((ic * k + ky) * k + kx) * ohw..][..ohw];
                for oy in y0..y1 {
                    let iy = oy * geo.stride + ky * geo.dilation - geo.padding;
                    let prow = &mut plane[iy * w..(iy + 1) * w];
                    let crow = &row[oy * ow..(oy + 1) * ow];
                    for ox in x0..x1 {
                        prow[ox * geo.stride + kx * geo.dilation - geo.padding] += crow[ox];
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding. `weight` is `(C_out, C_in / groups, k, k)`.
pub fn conv2d_raw(x: &Tensor, weight: &Tensor, bias: Option<&[f64]>, geo: ConvGeometry) -> Result<Tensor> {
    let (oh, ow) = geo.check(x.shape(), weight.shape())?;
    let [n, cin, h, w] = x.shape().dims();
    let [cout, cin_g, k, _] = weight.shape().dims();
    check_bias(bias, cout)?;
    let cout_g = cout / geo.groups;
    let taps = cin_g * k * k;
    let ohw = oh * ow;
    let mut out = Tensor::zeros(Shape::new(n, cout, oh, ow));
    let xd = x.data();
    let wd = weight.data();
    let od = out.data_mut();
    let mut buf = Vec::new();
    for b in 0..n {
        for g in 0..geo.groups {
            let src = &xd[(b * cin + g * cin_g) * h * w..(b * cin + (g + 1) * cin_g) * h * w];
            let cols = im2col(src, cin_g, h, w, k, oh, ow, geo, &mut buf);
            for oc in g * cout_g..(g + 1) * cout_g {
                let dst = &mut od[(b * cout + oc) * ohw..(b * cout + oc + 1) * ohw];
                if let Some(bias) = bias {
                    dst.iter_mut().for_each(|v| *v = bias[oc]);
                }
                for (r, &wv) in wd[oc * taps..(oc + 1) * taps].iter().enumerate() {
                    if wv == 0.0 {
                        continue;
                    }
                    for (d, &c) in dst.iter_mut().zip(&cols[r * ohw..(r + 1) * ohw]) {
                        *d += wv * c;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Option<Tensor>,
    pub db: Vec<f64>,
}

pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    geo: ConvGeometry,
    dout: &Tensor,
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads {
    let [n, cin, h, w] = x.shape().dims();
    let [cout, cin_g, k, _] = weight.shape().dims();
    let [_, _, oh, ow] = dout.shape().dims();
    let cout_g = cout / geo.groups;
    let taps = cin_g * k * k;
    let ohw = oh * ow;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(weight.shape()));
    let mut db = vec![0.0; cout];
    let xd = x.data();
    let wd = weight.data();
    let gd = dout.data();
    let mut buf = Vec::new();
    let mut dcols = vec![0.0; if need_dx { taps * ohw } else { 0 }];
    for b in 0..n {
        for g in 0..geo.groups {
            let lo = (b * cin + g * cin_g) * h * w;
            let hi = (b * cin + (g + 1) * cin_g) * h * w;
            if let Some(dw) = dw.as_mut() {
                let cols = im2col(&xd[lo..hi], cin_g, h, w, k, oh, ow, geo, &mut buf);
                let dwd = dw.data_mut();
                for oc in g * cout_g..(g + 1) * cout_g {
                    let gsl = &gd[(b * cout + oc) * ohw..(b * cout + oc + 1) * ohw];
                    for r in 0..taps {
                        let c = &cols[r * ohw..(r + 1) * ohw];
                        dwd[oc * taps + r] += c.iter().zip(gsl).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            for oc in g * cout_g..(g + 1) * cout_g {
                db[oc] += gd[(b * cout + oc) * ohw..(b * cout + oc + 1) * ohw].iter().sum::<f64>();
            }
            if let Some(dx) = dx.as_mut() {
                dcols.iter_mut().for_each(|v| *v = 0.0);
                for oc in g * cout_g..(g + 1) * cout_g {
                    let gsl = &gd[(b * cout + oc) * ohw..(b * cout + oc + 1) * ohw];
                    for (r, &wv) in wd[oc * taps..(oc + 1) * taps].iter().enumerate() {
                        if wv == 0.0 {
                            continue;
                        }
                        for (d, &gv) in dcols[r * ohw..(r + 1) * ohw].iter_mut().zip(gsl) {
                            *d += wv * gv;
                        }
                    }
                }
                col2im(&dcols, &mut dx.data_mut()[lo..hi], cin_g, h, w, k, oh, ow, geo);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Validated convolution for a [`ConvSpec`] (not deformable).
pub fn conv2d(x: &Tensor, spec: &ConvSpec, weight: &Tensor, bias: Option<&[f64]>) -> Result<Tensor> {
    spec.validate()?;
    if x.shape().c() != spec.in_channels {
        return Err(Error::Dimension {
            op: "conv2d",
            msg: format!("input has {} channels, spec expects {}", x.shape().c(), spec.in_channels),
        });
    }
    if weight.shape() != spec.weight_shape() {
        return Err(Error::ShapeMismatch {
            op: "conv2d weight",
            lhs: weight.shape(),
            rhs: spec.weight_shape(),
        });
    }
    conv2d_raw(x, weight, bias, spec.geometry())
}

/// Bilinear tap of one sample location: up to four (flat spatial index, weight)
/// corners plus the location's fractional parts.
#[derive(Clone, Copy, Debug, Default)]
struct Tap {
    idx: [usize; 4],
    valid: [bool; 4],
    ly: f64,
    lx: f64,
}

impl Tap {
    fn new(py: f64, px: f64, h: usize, w: usize) -> Tap {
        let y0 = py.floor();
        let x0 = px.floor();
        let (ly, lx) = (py - y0, px - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let mut tap = Tap {
            ly,
            lx,
            ..Default::default()
        };
        for (i, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            let (yy, xx) = (y0 + dy, x0 + dx);
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                tap.idx[i] = yy as usize * w + xx as usize;
                tap.valid[i] = true;
            }
        }
        tap
    }

    #[inline]
    fn corner(&self, plane: &[f64], i: usize) -> f64 {
        if self.valid[i] {
            plane[self.idx[i]]
        } else {
            0.0
        }
    }

    #[inline]
    fn weights(&self) -> [f64; 4] {
        let (ly, lx) = (self.ly, self.lx);
        [(1.0 - ly) * (1.0 - lx), (1.0 - ly) * lx, ly * (1.0 - lx), ly * lx]
    }

    #[inline]
    fn sample(&self, plane: &[f64]) -> f64 {
        let wts = self.weights();
        (0..4).map(|i| wts[i] * self.corner(plane, i)).sum()
    }

    /// (d sample / d py, d sample / d px).
    #[inline]
    fn slopes(&self, plane: &[f64]) -> (f64, f64) {
        let v = [0, 1, 2, 3].map(|i| self.corner(plane, i));
        let dy = (1.0 - self.lx) * (v[2] - v[0]) + self.lx * (v[3] - v[1]);
        let dx = (1.0 - self.ly) * (v[1] - v[0]) + self.ly * (v[3] - v[2]);
        (dy, dx)
    }

    /// Distance of the sample location to the nearest integer coordinate.
    fn kink_gap(&self) -> f64 {
        self.ly.min(1.0 - self.ly).min(self.lx).min(1.0 - self.lx)
    }
}

/// Per-image sampling table: taps[(t * oh + oy) * ow + ox].
fn build_taps(offsets: &Tensor, b: usize, k: usize, h: usize, w: usize, oh: usize, ow: usize, geo: ConvGeometry) -> Vec<Tap> {
    let mut taps = Vec::with_capacity(k * k * oh * ow);
    for ky in 0..k {
        for kx in 0..k {
            let t = ky * k + kx;
            for oy in 0..oh {
                for ox in 0..ow {
                    let dy = offsets.at(b, 2 * t, oy, ox);
                    let dx = offsets.at(b, 2 * t + 1, oy, ox);
                    let py = (oy * geo.stride + ky * geo.dilation) as f64 - geo.padding as f64 + dy;
                    let px = (ox * geo.stride + kx * geo.dilation) as f64 - geo.padding as f64 + dx;
                    taps.push(Tap::new(py, px, h, w));
                }
            }
        }
    }
    taps
}

fn check_deform(x: &Tensor, offsets: &Tensor, weight: &Tensor, geo: ConvGeometry) -> Result<(usize, usize)> {
    if geo.groups != 1 {
        return Err(Error::InvalidArgument("deformable conv supports groups = 1 only".into()));
    }
    let (oh, ow) = geo.check(x.shape(), weight.shape())?;
    let k = weight.shape().h();
    let want = Shape::new(x.shape().n(), 2 * k * k, oh, ow);
    if offsets.shape() != want {
        return Err(Error::ShapeMismatch {
            op: "deformable_conv2d offsets",
            lhs: offsets.shape(),
            rhs: want,
        });
    }
    Ok((oh, ow))
}

/// Deformable convolution (v1, no modulation). `offsets` is
/// `(N, 2*k*k, H_out, W_out)` with channel `2t` the row shift and `2t+1` the
/// column shift of kernel tap `t = ky*k + kx`. Out-of-image corners read zero.
///
/// Also returns the smallest distance of any sample location to an integer
/// coordinate, where the bilinear interpolant has a kink.
pub fn deform_conv2d_raw(
    x: &Tensor,
    offsets: &Tensor,
    weight: &Tensor,
    bias: Option<&[f64]>,
    geo: ConvGeometry,
) -> Result<(Tensor, f64)> {
    let (oh, ow) = check_deform(x, offsets, weight, geo)?;
    let [n, cin, h, w] = x.shape().dims();
    let [cout, _, k, _] = weight.shape().dims();
    check_bias(bias, cout)?;
    let kk = k * k;
    let positions = oh * ow;
    let mut out = Tensor::zeros(Shape::new(n, cout, oh, ow));
    let mut gap = f64::INFINITY;
    let mut cols = vec![0.0; cin * kk * positions];
    for b in 0..n {
        let taps = build_taps(offsets, b, k, h, w, oh, ow, geo);
        gap = taps.iter().fold(gap, |g, t| g.min(t.kink_gap()));
        for ic in 0..cin {
            let plane = &x.data()[(b * cin + ic) * h * w..(b * cin + ic + 1) * h * w];
            for t in 0..kk {
                let row = &mut cols[(ic * kk + t) * positions..(ic * kk + t + 1) * positions];
                for (p, v) in row.iter_mut().enumerate() {
                    *v = taps[t * positions + p].sample(plane);
                }
            }
        }
        let od = out.data_mut();
        for oc in 0..cout {
            let dst = &mut od[(b * cout + oc) * positions..(b * cout + oc + 1) * positions];
            if let Some(bias) = bias {
                dst.iter_mut().for_each(|v| *v = bias[oc]);
            }
            let wrow = &weight.data()[oc * cin * kk..(oc + 1) * cin * kk];
            for (j, &wv) in wrow.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let col = &cols[j * positions..(j + 1) * positions];
                for (o, c) in dst.iter_mut().zip(col) {
                    *o += wv * c;
                }
            }
        }
    }
    Ok((out, gap))
}

pub struct DeformGrads {
    pub dx: Option<Tensor>,
    pub doffsets: Option<Tensor>,
    pub dw: Option<Tensor>,
    pub db: Vec<f64>,
}

pub fn deform_conv2d_backward(
    x: &Tensor,
    offsets: &Tensor,
    weight: &Tensor,
    geo: ConvGeometry,
    dout: &Tensor,
    need: [bool; 3],
) -> DeformGrads {
    let [need_dx, need_doff, need_dw] = need;
    let [n, cin, h, w] = x.shape().dims();
    let [cout, _, k, _] = weight.shape().dims();
    let [_, _, oh, ow] = dout.shape().dims();
    let kk = k * k;
    let positions = oh * ow;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut doff = need_doff.then(|| Tensor::zeros(offsets.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(weight.shape()));
    let mut db = vec![0.0; cout];
    let mut dcols = vec![0.0; cin * kk * positions];
    for b in 0..n {
        let taps = build_taps(offsets, b, k, h, w, oh, ow, geo);
        let gsl = &dout.data()[b * cout * positions..(b + 1) * cout * positions];
        for oc in 0..cout {
            db[oc] += gsl[oc * positions..(oc + 1) * positions].iter().sum::<f64>();
        }
        if let Some(dw) = dw.as_mut() {
            for ic in 0..cin {
                let plane = &x.data()[(b * cin + ic) * h * w..(b * cin + ic + 1) * h * w];
                for t in 0..kk {
                    let col: Vec<f64> = (0..positions).map(|p| taps[t * positions + p].sample(plane)).collect();
                    for oc in 0..cout {
                        let g = &gsl[oc * positions..(oc + 1) * positions];
                        let acc: f64 = g.iter().zip(&col).map(|(a, c)| a * c).sum();
                        dw.data_mut()[(oc * cin + ic) * kk + t] += acc;
                    }
                }
            }
        }
        if !(need_dx || need_doff) {
            continue;
        }
        dcols.iter_mut().for_each(|v| *v = 0.0);
        for oc in 0..cout {
            let g = &gsl[oc * positions..(oc + 1) * positions];
            let wrow = &weight.data()[oc * cin * kk..(oc + 1) * cin * kk];
            for (j, &wv) in wrow.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let dst = &mut dcols[j * positions..(j + 1) * positions];
                for (d, gv) in dst.iter_mut().zip(g) {
                    *d += wv * gv;
                }
            }
        }
        for ic in 0..cin {
            let pbase = (b * cin + ic) * h * w;
            for t in 0..kk {
                let dc = &dcols[(ic * kk + t) * positions..(ic * kk + t + 1) * positions];
                for (p, &g) in dc.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let tap = &taps[t * positions + p];
                    if let Some(dx) = dx.as_mut() {
                        let wts = tap.weights();
                        let plane = &mut dx.data_mut()[pbase..pbase + h * w];
                        for i in 0..4 {
                            if tap.valid[i] {
                                plane[tap.idx[i]] += g * wts[i];
                            }
                        }
                    }
                    if let Some(doff) = doff.as_mut() {
                        let plane = &x.data()[pbase..pbase + h * w];
                        let (sy, sx) = tap.slopes(plane);
                        let (oy, ox) = (p / ow, p % ow);
                        let iy = offsets.shape().index(b, 2 * t, oy, ox);
                        let ix = offsets.shape().index(b, 2 * t + 1, oy, ox);
                        doff.data_mut()[iy] += g * sy;
                        doff.data_mut()[ix] += g * sx;
                    }
                }
            }
        }
    }
    DeformGrads {
        dx,
        doffsets: doff,
        dw,
        db,
    }
}

/// Validated deformable convolution for a [`ConvSpec`] of kind `Deformable`.
pub fn deformable_conv2d(
    x: &Tensor,
    spec: &ConvSpec,
    weight: &Tensor,
    bias: Option<&[f64]>,
    offsets: &Tensor,
) -> Result<Tensor> {
    spec.validate()?;
    if spec.kind != ConvKind::Deformable {
        return Err(Error::InvalidArgument(format!("{:?} spec passed to deformable_conv2d", spec.kind)));
    }
    Ok(deform_conv2d_raw(x, offsets, weight, bias, spec.geometry())?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormStats {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormOut {
    pub out: Tensor,
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    /// Batch statistics (train mode) or the running ones used (eval mode).
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-channel batch normalization. Train mode normalizes with the biased
/// batch variance; eval mode with the supplied running statistics.
pub fn batch_norm_full(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running: &BatchNormStats,
    mode: NormMode,
    eps: f64,
) -> Result<BatchNormOut> {
    let [n, c, h, w] = x.shape().dims();
    if gamma.len() != c || beta.len() != c || running.mean.len() != c || running.var.len() != c {
        return Err(Error::Dimension {
            op: "batch_norm",
            msg: format!("parameters do not match {c} channels"),
        });
    }
    let hw = h * w;
    let m = (n * hw) as f64;
    let (mean, var) = match mode {
        NormMode::Eval => (running.mean.clone(), running.var.clone()),
        NormMode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let lanes = (0..n).map(|b| &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw]);
                let mu = lanes.clone().flatten().sum::<f64>() / m;
                let v = lanes.flatten().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
                mean[ch] = mu;
                var[ch] = v;
            }
            (mean, var)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let z = (x.data()[i] - mean[ch]) * inv_std[ch];
                xhat.data_mut()[i] = z;
                out.data_mut()[i] = gamma[ch] * z + beta[ch];
            }
        }
    }
    Ok(BatchNormOut {
        out,
        xhat,
        inv_std,
        mean,
        var,
    })
}

/// `(1 - momentum) * running + momentum * batch`, applied to mean and variance.
pub fn update_running_stats(running: &mut BatchNormStats, batch_mean: &[f64], batch_var: &[f64], momentum: f64) {
    for (r, b) in running.mean.iter_mut().zip(batch_mean) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
    for (r, b) in running.var.iter_mut().zip(batch_var) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
}

/// Normalizes `x`; in train mode also folds the batch statistics into `running`.
pub fn batch_norm(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running: &mut BatchNormStats,
    mode: NormMode,
    momentum: f64,
    eps: f64,
) -> Result<Tensor> {
    let res = batch_norm_full(x, gamma, beta, running, mode, eps)?;
    if mode == NormMode::Train {
        update_running_stats(running, &res.mean, &res.var, momentum);
    }
    Ok(res.out)
}

/// Returns (dx, dgamma, dbeta).
pub fn batch_norm_backward(
    saved: &BatchNormOut,
    gamma: &[f64],
    mode: NormMode,
    dout: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = dout.shape().dims();
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut dx = Tensor::zeros(dout.shape());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let idx = || (0..n).flat_map(move |b| (b * c + ch) * hw..(b * c + ch + 1) * hw);
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for i in idx() {
            sum_g += dout.data()[i];
            sum_gx += dout.data()[i] * saved.xhat.data()[i];
        }
        dgamma[ch] = sum_gx;
        dbeta[ch] = sum_g;
        let scale = gamma[ch] * saved.inv_std[ch];
        for i in idx() {
            dx.data_mut()[i] = match mode {
                NormMode::Eval => scale * dout.data()[i],
                NormMode::Train => scale * (dout.data()[i] - sum_g / m - saved.xhat.data()[i] * sum_gx / m),
            };
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn pointwise_identity() {
        let mut r = rng(1);
        let x = Tensor::rand_uniform(Shape::new(2, 4, 5, 5), -1.0, 1.0, &mut r);
        let spec = ConvSpec::pointwise(4, 4);
        let eye = Tensor::from_fn(spec.weight_shape(), |[o, i, _, _]| (o == i) as u8 as f64);
        let y = conv2d(&x, &spec, &eye, Some(&[0.0; 4])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn depthwise_delta_identity() {
        let mut r = rng(2);
        let x = Tensor::rand_uniform(Shape::new(1, 3, 6, 6), -1.0, 1.0, &mut r);
        let spec = ConvSpec::depthwise(3, 3);
        let delta = Tensor::from_fn(spec.weight_shape(), |[_, _, y, xx]| (y == 1 && xx == 1) as u8 as f64);
        assert_eq!(conv2d(&x, &spec, &delta, None).unwrap(), x);
    }

    #[test]
    fn matches_naive_oracle_across_variants() {
        let mut r = rng(3);
        for k in [1, 3, 5, 7] {
            for d in [1, 2] {
                for depthwise in [false, true] {
                    let x = Tensor::rand_uniform(Shape::new(1, 3, 9, 8), -1.0, 1.0, &mut r);
                    let spec = if depthwise {
                        ConvSpec { dilation: d, ..ConvSpec::depthwise(3, k) }
                    } else {
                        ConvSpec::dilated(3, 4, k, d)
                    };
                    let wt = Tensor::rand_uniform(spec.weight_shape(), -1.0, 1.0, &mut r);
                    let bias: Vec<f64> = (0..spec.out_channels).map(|i| i as f64 * 0.1).collect();
                    let fast = conv2d(&x, &spec, &wt, Some(&bias)).unwrap();
                    let slow = oracle::naive_conv2d(&x, &wt, Some(&bias), spec.geometry()).unwrap();
                    assert_eq!(fast.shape(), Shape::new(1, spec.out_channels, 9, 8));
                    assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12, "k={k} d={d}");
                }
            }
        }
    }

    #[test]
    fn standard_three_by_three_oracle() {
        let mut r = rng(4);
        let x = Tensor::rand_uniform(Shape::new(1, 3, 6, 6), -1.0, 1.0, &mut r);
        let spec = ConvSpec::standard(3, 2, 3);
        let wt = Tensor::rand_uniform(spec.weight_shape(), -1.0, 1.0, &mut r);
        let fast = conv2d(&x, &spec, &wt, None).unwrap();
        let slow = oracle::naive_conv2d(&x, &wt, None, spec.geometry()).unwrap();
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
    }

    #[test]
    fn strided_conv_matches_oracle() {
        let mut r = rng(5);
        let x = Tensor::rand_uniform(Shape::new(2, 2, 8, 8), -1.0, 1.0, &mut r);
        let spec = ConvSpec::standard(2, 3, 3).with_stride(2);
        let wt = Tensor::rand_uniform(spec.weight_shape(), -1.0, 1.0, &mut r);
        let fast = conv2d(&x, &spec, &wt, None).unwrap();
        assert_eq!(fast.shape(), Shape::new(2, 3, 4, 4));
        let slow = oracle::naive_conv2d(&x, &wt, None, spec.geometry()).unwrap();
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::zeros(Shape::new(1, 3, 4, 4));
        let spec = ConvSpec::standard(4, 2, 3);
        let wt = Tensor::zeros(spec.weight_shape());
        assert!(conv2d(&x, &spec, &wt, None).is_err());
        assert!(ConvSpec::depthwise(3, 4).validate().is_err());
        assert!(ConvSpec { kernel: 3, ..ConvSpec::pointwise(2, 2) }.validate().is_err());
    }

    #[test]
    fn deformable_zero_offsets_is_standard_conv() {
        let mut r = rng(6);
        let x = Tensor::rand_uniform(Shape::new(2, 3, 6, 7), -1.0, 1.0, &mut r);
        let spec = ConvSpec::deformable(3, 4, 3);
        let wt = Tensor::rand_uniform(spec.weight_shape(), -1.0, 1.0, &mut r);
        let bias = [0.1, 0.2, -0.3, 0.0];
        let offsets = Tensor::zeros(Shape::new(2, 18, 6, 7));
        let d = deformable_conv2d(&x, &spec, &wt, Some(&bias), &offsets).unwrap();
        let s = conv2d_raw(&x, &wt, Some(&bias), spec.geometry()).unwrap();
        assert!(d.max_abs_diff(&s).unwrap() < 1e-12);
    }

    #[test]
    fn deformable_constant_field() {
        let mut r = rng(7);
        let v = 0.8;
        let x = Tensor::full(Shape::new(1, 2, 12, 12), v);
        let spec = ConvSpec::deformable(2, 1, 3);
        let wt = Tensor::rand_uniform(spec.weight_shape(), -1.0, 1.0, &mut r);
        let offsets = Tensor::rand_uniform(Shape::new(1, 18, 12, 12), -0.4, 0.4, &mut r);
        let y = deformable_conv2d(&x, &spec, &wt, Some(&[0.25]), &offsets).unwrap();
        let want = wt.sum() * v + 0.25;
        // Interior positions only: border taps reach the zero padding.
        for oy in 2..10 {
            for ox in 2..10 {
                assert!((y.at(0, 0, oy, ox) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deformable_matches_gather_oracle() {
        let mut r = rng(8);
        let x = Tensor::rand_uniform(Shape::new(1, 3, 7, 6), -1.0, 1.0, &mut r);
        let spec = ConvSpec::deformable(3, 2, 3);
        let wt = Tensor::rand_uniform(spec.weight_shape(), -1.0, 1.0, &mut r);
        let offsets = Tensor::rand_uniform(Shape::new(1, 18, 7, 6), -0.4, 0.4, &mut r);
        let fast = deformable_conv2d(&x, &spec, &wt, Some(&[0.5, -0.5]), &offsets).unwrap();
        let slow = oracle::naive_deform_conv2d(&x, &offsets, &wt, Some(&[0.5, -0.5]), spec.geometry()).unwrap();
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-10);
    }

    #[test]
    fn batch_norm_train_properties() {
        let mut r = rng(9);
        let x = Tensor::rand_uniform(Shape::new(3, 2, 4, 4), -2.0, 5.0, &mut r);
        let mut stats = BatchNormStats::new(2);
        let old = stats.clone();
        let res = batch_norm_full(&x, &[1.0; 2], &[0.0; 2], &stats, NormMode::Train, BATCH_NORM_EPS).unwrap();
        for ch in 0..2 {
            let mut s = 0.0;
            for b in 0..3 {
                for i in 0..16 {
                    s += res.xhat.data()[(b * 2 + ch) * 16 + i];
                }
            }
            assert!((s / 48.0).abs() < 1e-10);
        }
        batch_norm(&x, &[1.0; 2], &[0.0; 2], &mut stats, NormMode::Train, 0.1, BATCH_NORM_EPS).unwrap();
        for ch in 0..2 {
            assert!((stats.mean[ch] - (0.9 * old.mean[ch] + 0.1 * res.mean[ch])).abs() < 1e-15);
            assert!((stats.var[ch] - (0.9 * old.var[ch] + 0.1 * res.var[ch])).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_norm_standardized_input_passes_through() {
        // Exactly zero mean, unit variance per channel.
        let vals = [-1.0, 1.0, -1.0, 1.0];
        let x = Tensor::from_fn(Shape::new(1, 1, 2, 2), |[_, _, y, xx]| vals[y * 2 + xx]);
        let mut stats = BatchNormStats::new(1);
        let y = batch_norm(&x, &[1.0], &[0.0], &mut stats, NormMode::Train, 0.1, BATCH_NORM_EPS).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!(((a - b) / b).abs() < 1e-5);
        }
        let ev = batch_norm(&x, &[1.0], &[0.0], &mut BatchNormStats::new(1), NormMode::Eval, 0.1, BATCH_NORM_EPS).unwrap();
        for (a, b) in ev.data().iter().zip(x.data()) {
            assert!(((a - b) / b).abs() < 1e-5);
        }
    }
}
