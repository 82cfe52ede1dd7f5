//! Dense NCHW tensors and the non-convolutional elementary operations.
//!
//! Every tensor is rank 4. Lower-rank quantities use unit dimensions: a
//! scalar is `(1, 1, 1, 1)`, a batched matrix `(B, M, K)` is stored as
//! `(B, 1, M, K)`.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

/// Default epsilon for [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }
    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
    pub fn spatial(&self) -> usize {
        self.h() * self.w()
    }
    pub fn dims(&self) -> [usize; 4] {
        self.0
    }
    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c() + c) * self.h() + h) * self.w() + w
    }
    pub fn with_channels(&self, c: usize) -> Self {
        Shape([self.n(), c, self.h(), self.w()])
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n}, {c}, {h}, {w})")
    }
}

/// Dense rank-4 `f64` array in NCHW order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.0.iter().any(|&d| d == 0) {
            return Err(Error::ZeroDim(shape.0));
        }
        if data.len() != shape.numel() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        Tensor::new(Shape(dims), data)
    }

    /// Panics on a zero dimension; use [`Tensor::new`] for fallible construction.
    pub fn full(shape: Shape, value: f64) -> Self {
        assert!(shape.0.iter().all(|&d| d > 0), "zero dimension in {shape}");
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full(Shape::new(1, 1, 1, 1), value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut t = Tensor::zeros(shape);
        let [n, c, h, w] = shape.0;
        let mut i = 0;
        for a in 0..n {
            for b in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        t.data[i] = f([a, b, y, x]);
                        i += 1;
                    }
                }
            }
        }
        t
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let mut t = Tensor::zeros(shape);
        for v in &mut t.data {
            *v = rng.random_range(lo..hi);
        }
        t
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = v;
    }

    /// The single value of a `(1, 1, 1, 1)` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Dimension {
                op: "item",
                msg: format!("expected a scalar, got {}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        ensure_same(op, self.shape, other.shape)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_binary(self, other, "add", |a, b| a + b)
    }
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_binary(self, other, "sub", |a, b| a - b)
    }
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_binary(self, other, "mul", |a, b| a * b)
    }
    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// In-place `self += other` for equal shapes.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        ensure_same("add_assign", self.shape, other.shape)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        ensure_same("max_abs_diff", self.shape, other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn reshape(&self, dims: [usize; 4]) -> Result<Tensor> {
        let shape = Shape(dims);
        if shape.numel() != self.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                msg: format!("cannot reshape {} into {}", self.shape, shape),
            });
        }
        Tensor::new(shape, self.data.clone())
    }

    /// Swaps the last two axes: `(N, C, H, W) -> (N, C, W, H)`.
    pub fn transpose_last2(&self) -> Tensor {
        let [n, c, h, w] = self.shape.0;
        let mut out = Tensor::zeros(Shape::new(n, c, w, h));
        for b in 0..n * c {
            let src = &self.data[b * h * w..(b + 1) * h * w];
            let dst = &mut out.data[b * h * w..(b + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    dst[x * h + y] = src[y * w + x];
                }
            }
        }
        out
    }

    /// Channel block `[start, start + len)`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.shape.0;
        if len == 0 || start + len > c {
            return Err(Error::Dimension {
                op: "slice_channels",
                msg: format!("range {start}..{} out of {c} channels", start + len),
            });
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            let base = (b * c + start) * hw;
            data.extend_from_slice(&self.data[base..base + len * hw]);
        }
        Tensor::new(Shape::new(n, len, h, w), data)
    }
}

pub(crate) fn ensure_same(op: &'static str, lhs: Shape, rhs: Shape) -> Result<()> {
    if lhs != rhs {
        return Err(Error::ShapeMismatch { op, lhs, rhs });
    }
    Ok(())
}

/// Output shape of a broadcast binary op: every input dim must be 1 or equal
/// to the output dim.
pub fn broadcast_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape> {
    let mut out = [0; 4];
    for i in 0..4 {
        let (x, y) = (a.0[i], b.0[i]);
        out[i] = if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            return Err(Error::ShapeMismatch { op, lhs: a, rhs: b });
        };
    }
    Ok(Shape(out))
}

/// Maps a flat index in `out` to the flat index of the broadcast source `src`.
#[inline]
pub(crate) fn broadcast_source(out: Shape, src: Shape, flat: usize) -> usize {
    let [_, oc, oh, ow] = out.0;
    let x = flat % ow;
    let y = (flat / ow) % oh;
    let c = (flat / (ow * oh)) % oc;
    let n = flat / (ow * oh * oc);
    let pick = |i: usize, d: usize| if src.0[d] == 1 { 0 } else { i };
    src.index(pick(n, 0), pick(c, 1), pick(y, 2), pick(x, 3))
}

pub fn broadcast_binary(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        return a.zip_map(b, op, f);
    }
    let out = broadcast_shape(op, a.shape, b.shape)?;
    let data = (0..out.numel())
        .map(|i| {
            f(
                a.data[broadcast_source(out, a.shape, i)],
                b.data[broadcast_source(out, b.shape, i)],
            )
        })
        .collect();
    Tensor::new(out, data)
}

/// Sums `grad` (shaped like the broadcast output) back down to `target`.
pub(crate) fn reduce_to_shape(grad: &Tensor, target: Shape) -> Tensor {
    if grad.shape == target {
        return grad.clone();
    }
    let mut out = Tensor::zeros(target);
    for (i, g) in grad.data.iter().enumerate() {
        out.data[broadcast_source(grad.shape, target, i)] += g;
    }
    out
}

/// Batched matrix product over the trailing two axes: `(N, C, M, K) x (N, C, K, P)`.
pub fn matmul_batched(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, c, m, k] = a.shape.0;
    let [bn, bc, bk, p] = b.shape.0;
    if n != bn || c != bc || k != bk {
        return Err(Error::ShapeMismatch {
            op: "matmul_batched",
            lhs: a.shape,
            rhs: b.shape,
        });
    }
    let mut out = Tensor::zeros(Shape::new(n, c, m, p));
    for batch in 0..n * c {
        let lhs = &a.data[batch * m * k..(batch + 1) * m * k];
        let rhs = &b.data[batch * k * p..(batch + 1) * k * p];
        let dst = &mut out.data[batch * m * p..(batch + 1) * m * p];
        for i in 0..m {
            let row = &mut dst[i * p..(i + 1) * p];
            for (kk, &av) in lhs[i * k..(i + 1) * k].iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                for (o, &bv) in row.iter_mut().zip(&rhs[kk * p..(kk + 1) * p]) {
                    *o += av * bv;
                }
            }
        }
    }
    Ok(out)
}

pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs.first().ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let [n, _, h, w] = first.shape.0;
    for x in xs {
        if x.shape.n() != n || x.shape.h() != h || x.shape.w() != w {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: first.shape,
                rhs: x.shape,
            });
        }
    }
    let total: usize = xs.iter().map(|x| x.shape.c()).sum();
    let hw = h * w;
    let mut data = Vec::with_capacity(n * total * hw);
    for b in 0..n {
        for x in xs {
            let c = x.shape.c();
            data.extend_from_slice(&x.data[b * c * hw..(b + 1) * c * hw]);
        }
    }
    Tensor::new(Shape::new(n, total, h, w), data)
}

/// Splits along channels into consecutive blocks of the given sizes.
pub fn split_channels(x: &Tensor, parts: &[usize]) -> Result<Vec<Tensor>> {
    let total: usize = parts.iter().sum();
    if total != x.shape.c() {
        return Err(Error::Dimension {
            op: "split_channels",
            msg: format!("parts sum to {total}, tensor has {} channels", x.shape.c()),
        });
    }
    let mut start = 0;
    parts
        .iter()
        .map(|&len| {
            let t = x.slice_channels(start, len);
            start += len;
            t
        })
        .collect()
}

/// Source channel feeding output channel `out_c` under a `groups`-way shuffle.
#[inline]
pub fn shuffle_source(out_c: usize, channels: usize, groups: usize) -> usize {
    (out_c % groups) * (channels / groups) + out_c / groups
}

/// Reshape-transpose channel shuffle: `(g, C/g) -> (C/g, g)`.
pub fn channel_shuffle(x: &Tensor, groups: usize) -> Result<Tensor> {
    let c = x.shape.c();
    if groups == 0 || c % groups != 0 {
        return Err(Error::Divisibility {
            op: "channel_shuffle",
            channels: c,
            groups,
        });
    }
    let perm: Vec<usize> = (0..c).map(|oc| shuffle_source(oc, c, groups)).collect();
    Ok(permute_channels(x, &perm))
}

/// Output channel `i` is input channel `perm[i]`.
pub(crate) fn permute_channels(x: &Tensor, perm: &[usize]) -> Tensor {
    let [n, c, h, w] = x.shape.0;
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape);
    for b in 0..n {
        for (oc, &ic) in perm.iter().enumerate() {
            let src = (b * c + ic) * hw;
            let dst = (b * c + oc) * hw;
            out.data[dst..dst + hw].copy_from_slice(&x.data[src..src + hw]);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftmaxAxis {
    /// Over C at each (n, h, w).
    Channel,
    /// Over H*W for each (n, c).
    Spatial,
}

/// Visits every softmax/LN lane as (start offset, stride, length).
pub(crate) fn for_each_lane(shape: Shape, axis: SoftmaxAxis, mut f: impl FnMut(usize, usize, usize)) {
    let [n, c, h, w] = shape.0;
    let hw = h * w;
    match axis {
        SoftmaxAxis::Channel => {
            for b in 0..n {
                for p in 0..hw {
                    f(b * c * hw + p, hw, c);
                }
            }
        }
        SoftmaxAxis::Spatial => {
            for bc in 0..n * c {
                f(bc * hw, 1, hw);
            }
        }
    }
}

pub fn softmax(x: &Tensor, axis: SoftmaxAxis) -> Tensor {
    let mut out = Tensor::zeros(x.shape);
    for_each_lane(x.shape, axis, |start, stride, len| {
        let max = (0..len).fold(f64::NEG_INFINITY, |m, i| m.max(x.data[start + i * stride]));
        let mut total = 0.0;
        for i in 0..len {
            let e = (x.data[start + i * stride] - max).exp();
            out.data[start + i * stride] = e;
            total += e;
        }
        for i in 0..len {
            out.data[start + i * stride] /= total;
        }
    });
    out
}

/// Intermediate values of a channel layer norm, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormOut {
    pub out: Tensor,
    /// Pre-affine normalized input.
    pub xhat: Tensor,
    /// `1 / sqrt(var + eps)` per (n, h, w), laid out as `(N, 1, H, W)`.
    pub inv_std: Tensor,
}

/// Layer norm over the channel axis at every spatial position, with a
/// per-channel affine `gamma`, `beta` (each of length C).
pub fn layer_norm_full(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Result<LayerNormOut> {
    let [n, c, h, w] = x.shape.0;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Dimension {
            op: "layer_norm",
            msg: format!("affine length {}/{} for {c} channels", gamma.len(), beta.len()),
        });
    }
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape);
    let mut xhat = Tensor::zeros(x.shape);
    let mut inv_std = Tensor::zeros(Shape::new(n, 1, h, w));
    for b in 0..n {
        for p in 0..hw {
            let base = b * c * hw + p;
            let mean = (0..c).map(|ch| x.data[base + ch * hw]).sum::<f64>() / c as f64;
            let var = (0..c)
                .map(|ch| {
                    let d = x.data[base + ch * hw] - mean;
                    d * d
                })
                .sum::<f64>()
                / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.data[b * hw + p] = inv;
            for ch in 0..c {
                let i = base + ch * hw;
                let z = (x.data[i] - mean) * inv;
                xhat.data[i] = z;
                out.data[i] = gamma[ch] * z + beta[ch];
            }
        }
    }
    Ok(LayerNormOut { out, xhat, inv_std })
}

pub fn layer_norm(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Tensor> {
    Ok(layer_norm_full(x, gamma, beta, eps)?.out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Average,
    Max,
}

/// Global pooling to `(N, C, 1, 1)`. For max pooling the second value holds
/// the winning spatial offset per (n, c), lowest index on ties.
pub fn global_pool_full(x: &Tensor, kind: PoolKind) -> (Tensor, Vec<usize>) {
    let [n, c, h, w] = x.shape.0;
    let hw = h * w;
    let mut out = Tensor::zeros(Shape::new(n, c, 1, 1));
    let mut arg = Vec::new();
    for bc in 0..n * c {
        let lane = &x.data[bc * hw..(bc + 1) * hw];
        match kind {
            PoolKind::Average => out.data[bc] = lane.iter().sum::<f64>() / hw as f64,
            PoolKind::Max => {
                let mut best = 0;
                for (i, &v) in lane.iter().enumerate() {
                    if v > lane[best] {
                        best = i;
                    }
                }
                out.data[bc] = lane[best];
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn global_pool(x: &Tensor, kind: PoolKind) -> Tensor {
    global_pool_full(x, kind).0
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid_scalar(v))
}

/// Complex tensor as a pair of equally shaped real tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexTensor {
    pub fn new(re: Tensor, im: Tensor) -> Result<Self> {
        ensure_same("complex", re.shape(), im.shape())?;
        Ok(ComplexTensor { re, im })
    }

    pub fn from_real(re: Tensor) -> Self {
        let im = Tensor::zeros(re.shape());
        ComplexTensor { re, im }
    }

    pub fn shape(&self) -> Shape {
        self.re.shape()
    }

    /// Element-wise complex product; `conj_rhs` multiplies by `conj(rhs)`.
    pub fn mul(&self, rhs: &ComplexTensor, conj_rhs: bool) -> Result<ComplexTensor> {
        ensure_same("complex_mul", self.shape(), rhs.shape())?;
        let sign = if conj_rhs { -1.0 } else { 1.0 };
        let mut re = Tensor::zeros(self.shape());
        let mut im = Tensor::zeros(self.shape());
        for i in 0..self.re.numel() {
            let (a, b) = (self.re.data[i], self.im.data[i]);
            let (c, d) = (rhs.re.data[i], sign * rhs.im.data[i]);
            re.data[i] = a * c - b * d;
            im.data[i] = a * d + b * c;
        }
        Ok(ComplexTensor { re, im })
    }

    pub fn max_abs_imag(&self) -> f64 {
        self.im.max_abs()
    }
}

/// One feature map per modality; both share a shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityPair<T = Tensor> {
    pub rgb: T,
    pub ir: T,
}

impl<T> ModalityPair<T> {
    pub fn map<U>(self, mut f: impl FnMut(T) -> U) -> ModalityPair<U> {
        ModalityPair {
            rgb: f(self.rgb),
            ir: f(self.ir),
        }
    }

    pub fn try_map<U, E>(self, mut f: impl FnMut(T) -> std::result::Result<U, E>) -> std::result::Result<ModalityPair<U>, E> {
        Ok(ModalityPair {
            rgb: f(self.rgb)?,
            ir: f(self.ir)?,
        })
    }

    pub fn as_ref(&self) -> ModalityPair<&T> {
        ModalityPair {
            rgb: &self.rgb,
            ir: &self.ir,
        }
    }
}

impl ModalityPair<Tensor> {
    pub fn new(rgb: Tensor, ir: Tensor) -> Result<Self> {
        ensure_same("modality_pair", rgb.shape(), ir.shape())?;
        Ok(ModalityPair { rgb, ir })
    }

    pub fn shape(&self) -> Shape {
        self.rgb.shape()
    }

    pub fn swapped(&self) -> Self {
        ModalityPair {
            rgb: self.ir.clone(),
            ir: self.rgb.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn channel_index_tensor(c: usize) -> Tensor {
        Tensor::from_fn(Shape::new(1, c, 2, 2), |[_, ch, y, x]| (ch * 100 + y * 2 + x) as f64)
    }

    #[test]
    fn shuffle_six_by_two() {
        let x = Tensor::from_fn(Shape::new(1, 6, 1, 1), |[_, c, _, _]| c as f64);
        let y = channel_shuffle(&x, 2).unwrap();
        assert_eq!(y.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn shuffle_one_group_is_identity() {
        let x = channel_index_tensor(5);
        assert_eq!(channel_shuffle(&x, 1).unwrap(), x);
    }

    #[test]
    fn shuffle_rejects_indivisible() {
        let x = channel_index_tensor(6);
        assert!(matches!(
            channel_shuffle(&x, 4),
            Err(Error::Divisibility { channels: 6, groups: 4, .. })
        ));
    }

    #[test]
    fn shuffle_inverse_by_search() {
        let mut r = rng();
        let x = Tensor::rand_uniform(Shape::new(2, 12, 3, 3), -1.0, 1.0, &mut r);
        let y = channel_shuffle(&x, 4).unwrap();
        // Recover the inverse permutation by matching channel contents.
        let inverse: Vec<usize> = (0..12)
            .map(|ic| {
                let want = x.slice_channels(ic, 1).unwrap();
                (0..12)
                    .find(|&oc| y.slice_channels(oc, 1).unwrap() == want)
                    .unwrap()
            })
            .collect();
        let restored = permute_channels(&y, &inverse);
        assert_eq!(restored, x);
    }

    #[test]
    fn softmax_cases() {
        let zeros = Tensor::zeros(Shape::new(1, 4, 1, 1));
        let s = softmax(&zeros, SoftmaxAxis::Channel);
        assert_eq!(s.data(), &[0.25; 4]);

        let big = Tensor::from_vec([1, 1, 1, 2], vec![1000.0, 1000.0]).unwrap();
        let s = softmax(&big, SoftmaxAxis::Spatial);
        assert_eq!(s.data(), &[0.5, 0.5]);

        let mut r = rng();
        let x = Tensor::rand_uniform(Shape::new(2, 3, 4, 5), -3.0, 3.0, &mut r);
        let s = softmax(&x, SoftmaxAxis::Channel);
        for b in 0..2 {
            for y in 0..4 {
                for xx in 0..5 {
                    let total: f64 = (0..3).map(|c| s.at(b, c, y, xx)).sum();
                    assert!((total - 1.0).abs() < 1e-12);
                }
            }
        }
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn layer_norm_cases() {
        let x = Tensor::full(Shape::new(1, 3, 2, 2), 4.5);
        let out = layer_norm(&x, &[1.0; 3], &[0.0; 3], LAYER_NORM_EPS).unwrap();
        assert!(out.max_abs() == 0.0);

        let x = Tensor::from_vec([1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let out = layer_norm(&x, &[1.0; 3], &[0.0; 3], LAYER_NORM_EPS).unwrap();
        // mean 2, biased variance 2/3.
        let inv = 1.0 / (2.0f64 / 3.0 + LAYER_NORM_EPS).sqrt();
        let want = [-inv, 0.0, inv];
        for (a, b) in out.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
        let mean: f64 = out.data().iter().sum::<f64>() / 3.0;
        let var: f64 = out.data().iter().map(|v| v * v).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-5);

        let beta = [0.3, -0.2, 0.9];
        let out = layer_norm(&x, &[0.0; 3], &beta, LAYER_NORM_EPS).unwrap();
        assert_eq!(out.data(), &beta);
    }

    #[test]
    fn layer_norm_moments_on_random_input() {
        let mut r = rng();
        let x = Tensor::rand_uniform(Shape::new(2, 8, 3, 3), -2.0, 2.0, &mut r);
        let out = layer_norm_full(&x, &[1.0; 8], &[0.0; 8], LAYER_NORM_EPS).unwrap();
        for b in 0..2 {
            for y in 0..3 {
                for xx in 0..3 {
                    let vals: Vec<f64> = (0..8).map(|c| out.xhat.at(b, c, y, xx)).collect();
                    let mean = vals.iter().sum::<f64>() / 8.0;
                    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
                    assert!(mean.abs() < 1e-10);
                    assert!((var - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn pooling_cases() {
        let x = Tensor::full(Shape::new(1, 2, 3, 3), 1.25);
        assert_eq!(global_pool(&x, PoolKind::Average).data(), &[1.25, 1.25]);
        assert_eq!(global_pool(&x, PoolKind::Max).data(), &[1.25, 1.25]);

        let g = Tensor::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(global_pool(&g, PoolKind::Average).item().unwrap(), 1.5);
        assert_eq!(global_pool(&g, PoolKind::Max).item().unwrap(), 3.0);

        let mut r = rng();
        let x = Tensor::rand_uniform(Shape::new(2, 3, 5, 4), -1.0, 1.0, &mut r);
        let avg = global_pool(&x, PoolKind::Average);
        for n in 0..2 {
            for c in 0..3 {
                let mut s = 0.0;
                for y in 0..5 {
                    for xx in 0..4 {
                        s += x.at(n, c, y, xx);
                    }
                }
                assert!((avg.at(n, c, 0, 0) - s / 20.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn max_pool_ties_pick_lowest_index() {
        let x = Tensor::from_vec([1, 1, 1, 4], vec![1.0, 3.0, 3.0, 0.0]).unwrap();
        let (_, arg) = global_pool_full(&x, PoolKind::Max);
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn matmul_identity_and_errors() {
        let mut r = rng();
        let a = Tensor::rand_uniform(Shape::new(2, 1, 3, 4), -1.0, 1.0, &mut r);
        let eye = Tensor::from_fn(Shape::new(2, 1, 4, 4), |[_, _, i, j]| (i == j) as u8 as f64);
        assert_eq!(matmul_batched(&a, &eye).unwrap(), a);
        let bad = Tensor::zeros(Shape::new(2, 1, 3, 4));
        assert!(matches!(matmul_batched(&a, &bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn split_concat_round_trip() {
        let mut r = rng();
        let x = Tensor::rand_uniform(Shape::new(2, 9, 3, 2), -1.0, 1.0, &mut r);
        let parts = split_channels(&x, &[3, 3, 3]).unwrap();
        let refs: Vec<&Tensor> = parts.iter().collect();
        assert_eq!(concat_channels(&refs).unwrap(), x);
        assert!(split_channels(&x, &[4, 4]).is_err());
    }

    #[test]
    fn activation_closed_forms() {
        let x = Tensor::from_vec([1, 1, 1, 3], vec![0.0, -1.0, 2.0]).unwrap();
        assert_eq!(silu(&x).data()[0], 0.0);
        assert_eq!(relu(&x).data()[1], 0.0);
        assert_eq!(sigmoid(&x).data()[0], 0.5);
    }

    #[test]
    fn broadcast_rules() {
        let a = Tensor::ones(Shape::new(2, 3, 2, 2));
        let g = Tensor::from_fn(Shape::new(2, 3, 1, 1), |[n, c, _, _]| (n * 3 + c) as f64);
        let p = a.mul(&g).unwrap();
        assert_eq!(p.at(1, 2, 1, 0), 5.0);
        let bad = Tensor::ones(Shape::new(2, 2, 1, 1));
        assert!(a.mul(&bad).is_err());
        let back = reduce_to_shape(&p, g.shape());
        assert_eq!(back.at(1, 2, 0, 0), 20.0);
    }

    #[test]
    fn construction_invariants() {
        assert!(matches!(Tensor::from_vec([1, 0, 1, 1], vec![]), Err(Error::ZeroDim(_))));
        assert!(matches!(
            Tensor::from_vec([1, 2, 1, 1], vec![1.0]),
            Err(Error::DataLength { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn shuffle_preserves_multiset(groups in 1usize..5, per in 1usize..4, seed in 0u64..1000) {
                let c = groups * per;
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let x = Tensor::rand_uniform(Shape::new(1, c, 2, 3), -1.0, 1.0, &mut r);
                let y = channel_shuffle(&x, groups).unwrap();
                let mut a = x.data().to_vec();
                let mut b = y.data().to_vec();
                a.sort_by(f64::total_cmp);
                b.sort_by(f64::total_cmp);
                prop_assert_eq!(a, b);
            }

            #[test]
            fn softmax_shift_invariant(shift in -50.0f64..50.0, seed in 0u64..1000) {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let x = Tensor::rand_uniform(Shape::new(1, 4, 3, 3), -2.0, 2.0, &mut r);
                for axis in [SoftmaxAxis::Channel, SoftmaxAxis::Spatial] {
                    let a = softmax(&x, axis);
                    let b = softmax(&x.map(|v| v + shift), axis);
                    prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
                }
            }
        }
    }
}
