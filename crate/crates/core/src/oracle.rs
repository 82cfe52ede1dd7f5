//! Slow reference implementations used as ground truth by the test suites
//! and by `fredft verify`. Nothing here shares code with the fast paths.

use std::f64::consts::PI;

use crate::conv::ConvGeometry;
use crate::error::{Error, Result};
use crate::tensor::{ComplexTensor, Shape, Tensor};

/// Direct O((HW)^2) DFT over (H, W) of every (n, c) slice.
pub fn naive_dft2d(x: &ComplexTensor) -> ComplexTensor {
    let [n, c, h, w] = x.shape().dims();
    let mut re = Tensor::zeros(x.shape());
    let mut im = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            for u in 0..h {
                for v in 0..w {
                    let (mut sr, mut si) = (0.0, 0.0);
                    for y in 0..h {
                        for xx in 0..w {
                            let phase = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                            let (cs, sn) = (phase.cos(), phase.sin());
                            let (a, bb) = (x.re.at(b, ch, y, xx), x.im.at(b, ch, y, xx));
                            sr += a * cs - bb * sn;
                            si += a * sn + bb * cs;
                        }
                    }
                    re.set(b, ch, u, v, sr);
                    im.set(b, ch, u, v, si);
                }
            }
        }
    }
    ComplexTensor { re, im }
}

/// `out[y, x] = sum_{i, j} a[i, j] * b[(y - i) mod H, (x - j) mod W]` per slice.
pub fn circular_conv2d(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "circular_conv2d",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let [_, _, h, w] = a.shape().dims();
    Ok(Tensor::from_fn(a.shape(), |[bn, ch, y, x]| {
        let mut s = 0.0;
        for i in 0..h {
            for j in 0..w {
                s += a.at(bn, ch, i, j) * b.at(bn, ch, (y + h - i) % h, (x + w - j) % w);
            }
        }
        s
    }))
}

/// Direct-summation grouped convolution with zero padding.
pub fn naive_conv2d(x: &Tensor, weight: &Tensor, bias: Option<&[f64]>, geo: ConvGeometry) -> Result<Tensor> {
    let [n, cin, h, w] = x.shape().dims();
    let [cout, cin_g, k, _] = weight.shape().dims();
    if cin_g * geo.groups != cin {
        return Err(Error::InvalidArgument("naive_conv2d: channel mismatch".into()));
    }
    let oh = (h + 2 * geo.padding - geo.dilation * (k - 1) - 1) / geo.stride + 1;
    let ow = (w + 2 * geo.padding - geo.dilation * (k - 1) - 1) / geo.stride + 1;
    let cout_g = cout / geo.groups;
    let mut out = Tensor::zeros(Shape::new(n, cout, oh, ow));
    for b in 0..n {
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bias.map_or(0.0, |bb| bb[oc]);
                    for icg in 0..cin_g {
                        let ic = (oc / cout_g) * cin_g + icg;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * geo.stride + ky * geo.dilation) as isize - geo.padding as isize;
                                let ix = (ox * geo.stride + kx * geo.dilation) as isize - geo.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += weight.at(oc, icg, ky, kx) * x.at(b, ic, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(b, oc, oy, ox, s);
                }
            }
        }
    }
    Ok(out)
}

fn bilinear(x: &Tensor, b: usize, c: usize, py: f64, px: f64) -> f64 {
    let [_, _, h, w] = x.shape().dims();
    let read = |y: f64, xx: f64| -> f64 {
        if y < 0.0 || xx < 0.0 || y > (h - 1) as f64 || xx > (w - 1) as f64 {
            0.0
        } else {
            x.at(b, c, y as usize, xx as usize)
        }
    };
    let (y0, x0) = (py.floor(), px.floor());
    let (ly, lx) = (py - y0, px - x0);
    (1.0 - ly) * (1.0 - lx) * read(y0, x0)
        + (1.0 - ly) * lx * read(y0, x0 + 1.0)
        + ly * (1.0 - lx) * read(y0 + 1.0, x0)
        + ly * lx * read(y0 + 1.0, x0 + 1.0)
}

/// Deformable convolution by direct bilinear gathering at every tap.
pub fn naive_deform_conv2d(
    x: &Tensor,
    offsets: &Tensor,
    weight: &Tensor,
    bias: Option<&[f64]>,
    geo: ConvGeometry,
) -> Result<Tensor> {
    let [n, cin, _, _] = x.shape().dims();
    let [cout, wc, k, _] = weight.shape().dims();
    if wc != cin {
        return Err(Error::InvalidArgument("naive_deform_conv2d: channel mismatch".into()));
    }
    let [_, _, oh, ow] = offsets.shape().dims();
    let mut out = Tensor::zeros(Shape::new(n, cout, oh, ow));
    for b in 0..n {
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bias.map_or(0.0, |bb| bb[oc]);
                    for ic in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let t = ky * k + kx;
                                let py = (oy * geo.stride + ky * geo.dilation) as f64 - geo.padding as f64
                                    + offsets.at(b, 2 * t, oy, ox);
                                let px = (ox * geo.stride + kx * geo.dilation) as f64 - geo.padding as f64
                                    + offsets.at(b, 2 * t + 1, oy, ox);
                                s += weight.at(oc, ic, ky, kx) * bilinear(x, b, ic, py, px);
                            }
                        }
                    }
                    out.set(b, oc, oy, ox, s);
                }
            }
        }
    }
    Ok(out)
}
