use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::conv::{self, BatchNormOut, ConvGeometry, NormMode};
use crate::error::{Error, Result};
use crate::fft::{self, Direction};
use crate::tensor::{self, ensure_same, reduce_to_shape, PoolKind, Shape, SoftmaxAxis, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Unary {
    Relu,
    Silu,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Atan,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FftPart {
    Re,
    Im,
}

/// A recorded operation. Indices refer to earlier nodes on the same tape.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Unary(Unary, usize),
    Binary(Binary, usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    SumSpatial(usize),
    Reshape(usize),
    TransposeLast2(usize),
    Matmul(usize, usize),
    Concat(Vec<usize>),
    SliceChannels(usize, usize),
    PermuteChannels(usize, Vec<usize>),
    Softmax(usize, SoftmaxAxis),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor,
        inv_std: Tensor,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        saved: Box<BatchNormOut>,
        mode: NormMode,
    },
    GlobalAvg(usize),
    GlobalMax(usize, Vec<usize>),
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geo: ConvGeometry,
    },
    Deform {
        x: usize,
        off: usize,
        w: usize,
        b: Option<usize>,
        geo: ConvGeometry,
    },
    Fft {
        re: usize,
        im: Option<usize>,
        dir: Direction,
        scale: f64,
        part: FftPart,
    },
    Gather(usize, Vec<usize>),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        scale: f64,
    },
}

pub(crate) struct Node {
    pub(crate) value: Rc<Tensor>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Records a forward pass for reverse-mode differentiation.
///
/// A tape is single-threaded; create one per forward/backward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    kink_gap: Cell<f64>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            kink_gap: Cell::new(f64::INFINITY),
        }
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Smallest distance of any recorded input to a point where an op is not
    /// differentiable (ReLU at 0, ties in max/min, clamp bounds, integer
    /// bilinear sample coordinates).
    pub fn kink_gap(&self) -> f64 {
        self.kink_gap.get()
    }

    fn note_kink(&self, gap: f64) {
        if gap < self.kink_gap.get() {
            self.kink_gap.set(gap);
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one. Fan-out contributions are summed.
    pub fn backward(&self, loss: Var<'_>) -> Result<Grads> {
        assert!(std::ptr::eq(loss.tape, self), "loss recorded on another tape");
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape();
        if shape.numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(shape));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            backprop_node(&nodes, id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Grads { grads })
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// The gradient, or zeros when nothing flowed into `v`.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) -> Result<()> {
    if !nodes[id].requires_grad {
        return Ok(());
    }
    match grads[id].as_mut() {
        Some(acc) => acc.add_assign(&g)?,
        None => grads[id] = Some(g),
    }
    Ok(())
}

fn per_channel(t: &Tensor) -> Tensor {
    // (N, C, H, W) -> (1, C, 1, 1) sums.
    reduce_to_shape(t, Shape::new(1, t.shape().c(), 1, 1))
}

fn backprop_node(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let val = |i: usize| nodes[i].value.clone();
    let need = |i: usize| nodes[i].requires_grad;
    let out = nodes[id].value.clone();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Unary(kind, x) => {
            let xv = val(*x);
            let d = match kind {
                Unary::Relu => xv.zip_map(g, "relu'", |x, g| if x > 0.0 { g } else { 0.0 })?,
                Unary::Silu => xv.zip_map(g, "silu'", |x, g| {
                    let s = tensor::sigmoid_scalar(x);
                    g * (s + x * s * (1.0 - s))
                })?,
                Unary::Sigmoid => out.zip_map(g, "sigmoid'", |y, g| g * y * (1.0 - y))?,
                Unary::Exp => out.zip_map(g, "exp'", |y, g| g * y)?,
                Unary::Log => xv.zip_map(g, "log'", |x, g| g / x)?,
                Unary::Sqrt => out.zip_map(g, "sqrt'", |y, g| g / (2.0 * y))?,
                Unary::Atan => xv.zip_map(g, "atan'", |x, g| g / (1.0 + x * x))?,
                Unary::Square => xv.zip_map(g, "square'", |x, g| 2.0 * x * g)?,
            };
            accumulate(nodes, grads, *x, d)?;
        }
        Op::Binary(kind, a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (sa, sb) = (av.shape(), bv.shape());
            let (ga, gb) = match kind {
                Binary::Add => (need(*a).then(|| g.clone()), need(*b).then(|| g.clone())),
                Binary::Sub => (need(*a).then(|| g.clone()), need(*b).then(|| g.scale(-1.0))),
                Binary::Mul => (
                    need(*a).then(|| g.mul(&bv)).transpose()?,
                    need(*b).then(|| g.mul(&av)).transpose()?,
                ),
                Binary::Div => (
                    need(*a).then(|| tensor::broadcast_binary(g, &bv, "div'", |g, b| g / b)).transpose()?,
                    need(*b)
                        .then(|| -> Result<Tensor> {
                            // -g * a / b^2 == -g * out / b
                            let t = g.mul(&out)?;
                            tensor::broadcast_binary(&t, &bv, "div'", |t, b| -t / b)
                        })
                        .transpose()?,
                ),
                Binary::Max | Binary::Min => {
                    ensure_same("max/min backward", sa, sb)?;
                    let pick_a = |x: f64, y: f64| if *kind == Binary::Max { x >= y } else { x <= y };
                    let mut ga = Tensor::zeros(sa);
                    let mut gb = Tensor::zeros(sb);
                    for i in 0..g.numel() {
                        if pick_a(av.data()[i], bv.data()[i]) {
                            ga.data_mut()[i] = g.data()[i];
                        } else {
                            gb.data_mut()[i] = g.data()[i];
                        }
                    }
                    (Some(ga), Some(gb))
                }
            };
            if let Some(ga) = ga {
                accumulate(nodes, grads, *a, reduce_to_shape(&ga, sa))?;
            }
            if let Some(gb) = gb {
                accumulate(nodes, grads, *b, reduce_to_shape(&gb, sb))?;
            }
        }
        Op::Scale(x, s) => accumulate(nodes, grads, *x, g.scale(*s))?,
        Op::Offset(x) => accumulate(nodes, grads, *x, g.clone())?,
        Op::Clamp(x, lo, hi) => {
            let d = val(*x).zip_map(g, "clamp'", |x, g| if x >= *lo && x <= *hi { g } else { 0.0 })?;
            accumulate(nodes, grads, *x, d)?;
        }
        Op::Sum(x) => {
            let s = val(*x).shape();
            accumulate(nodes, grads, *x, Tensor::full(s, g.data()[0]))?;
        }
        Op::SumSpatial(x) => {
            let s = val(*x).shape();
            let hw = s.spatial();
            let mut d = Tensor::zeros(s);
            for (bc, &gv) in g.data().iter().enumerate() {
                d.data_mut()[bc * hw..(bc + 1) * hw].iter_mut().for_each(|v| *v = gv);
            }
            accumulate(nodes, grads, *x, d)?;
        }
        Op::Reshape(x) => {
            let s = val(*x).shape();
            accumulate(nodes, grads, *x, g.reshape(s.dims())?)?;
        }
        Op::TransposeLast2(x) => accumulate(nodes, grads, *x, g.transpose_last2())?,
        Op::Matmul(a, b) => {
            if need(*a) {
                let bt = val(*b).transpose_last2();
                accumulate(nodes, grads, *a, tensor::matmul_batched(g, &bt)?)?;
            }
            if need(*b) {
                let at = val(*a).transpose_last2();
                accumulate(nodes, grads, *b, tensor::matmul_batched(&at, g)?)?;
            }
        }
        Op::Concat(parts) => {
            let mut start = 0;
            for &p in parts {
                let c = val(p).shape().c();
                if need(p) {
                    accumulate(nodes, grads, p, g.slice_channels(start, c)?)?;
                }
                start += c;
            }
        }
        Op::SliceChannels(x, start) => {
            let xs = val(*x).shape();
            let [n, c, h, w] = xs.dims();
            let len = g.shape().c();
            let hw = h * w;
            let mut d = Tensor::zeros(xs);
            for b in 0..n {
                let dst = (b * c + start) * hw;
                let src = b * len * hw;
                d.data_mut()[dst..dst + len * hw].copy_from_slice(&g.data()[src..src + len * hw]);
            }
            accumulate(nodes, grads, *x, d)?;
        }
        Op::PermuteChannels(x, perm) => {
            let mut inverse = vec![0; perm.len()];
            for (o, &i) in perm.iter().enumerate() {
                inverse[i] = o;
            }
            accumulate(nodes, grads, *x, tensor::permute_channels(g, &inverse))?;
        }
        Op::Softmax(x, axis) => {
            let mut d = Tensor::zeros(out.shape());
            tensor::for_each_lane(out.shape(), *axis, |start, stride, len| {
                let dot: f64 = (0..len)
                    .map(|i| out.data()[start + i * stride] * g.data()[start + i * stride])
                    .sum();
                for i in 0..len {
                    let j = start + i * stride;
                    d.data_mut()[j] = out.data()[j] * (g.data()[j] - dot);
                }
            });
            accumulate(nodes, grads, *x, d)?;
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gv = val(*gamma);
            let [n, c, h, w] = g.shape().dims();
            let hw = h * w;
            if need(*gamma) {
                accumulate(nodes, grads, *gamma, per_channel(&g.mul(xhat)?))?;
            }
            if need(*beta) {
                accumulate(nodes, grads, *beta, per_channel(g))?;
            }
            if need(*x) {
                let mut d = Tensor::zeros(g.shape());
                for b in 0..n {
                    for p in 0..hw {
                        let base = b * c * hw + p;
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for ch in 0..c {
                            let dz = g.data()[base + ch * hw] * gv.data()[ch];
                            s1 += dz;
                            s2 += dz * xhat.data()[base + ch * hw];
                        }
                        let inv = inv_std.data()[b * hw + p];
                        for ch in 0..c {
                            let i = base + ch * hw;
                            let dz = g.data()[i] * gv.data()[ch];
                            d.data_mut()[i] = inv * (dz - s1 / c as f64 - xhat.data()[i] * s2 / c as f64);
                        }
                    }
                }
                accumulate(nodes, grads, *x, d)?;
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            saved,
            mode,
        } => {
            let gv = val(*gamma);
            let (dx, dg, db) = conv::batch_norm_backward(saved, gv.data(), *mode, g);
            let c = dg.len();
            accumulate(nodes, grads, *x, dx)?;
            accumulate(nodes, grads, *gamma, Tensor::new(Shape::new(1, c, 1, 1), dg)?)?;
            accumulate(nodes, grads, *beta, Tensor::new(Shape::new(1, c, 1, 1), db)?)?;
        }
        Op::GlobalAvg(x) => {
            let s = val(*x).shape();
            let hw = s.spatial();
            let mut d = Tensor::zeros(s);
            for (bc, &gv) in g.data().iter().enumerate() {
                d.data_mut()[bc * hw..(bc + 1) * hw].iter_mut().for_each(|v| *v = gv / hw as f64);
            }
            accumulate(nodes, grads, *x, d)?;
        }
        Op::GlobalMax(x, arg) => {
            let s = val(*x).shape();
            let hw = s.spatial();
            let mut d = Tensor::zeros(s);
            for (bc, &gv) in g.data().iter().enumerate() {
                d.data_mut()[bc * hw + arg[bc]] = gv;
            }
            accumulate(nodes, grads, *x, d)?;
        }
        Op::Conv { x, w, b, geo } => {
            let res = conv::conv2d_backward(&val(*x), &val(*w), *geo, g, need(*x), need(*w));
            if let Some(dx) = res.dx {
                accumulate(nodes, grads, *x, dx)?;
            }
            if let Some(dw) = res.dw {
                accumulate(nodes, grads, *w, dw)?;
            }
            if let Some(b) = b {
                let c = res.db.len();
                accumulate(nodes, grads, *b, Tensor::new(Shape::new(1, c, 1, 1), res.db)?)?;
            }
        }
        Op::Deform { x, off, w, b, geo } => {
            let res = conv::deform_conv2d_backward(
                &val(*x),
                &val(*off),
                &val(*w),
                *geo,
                g,
                [need(*x), need(*off), need(*w)],
            );
            if let Some(dx) = res.dx {
                accumulate(nodes, grads, *x, dx)?;
            }
            if let Some(d) = res.doffsets {
                accumulate(nodes, grads, *off, d)?;
            }
            if let Some(dw) = res.dw {
                accumulate(nodes, grads, *w, dw)?;
            }
            if let Some(b) = b {
                let c = res.db.len();
                accumulate(nodes, grads, *b, Tensor::new(Shape::new(1, c, 1, 1), res.db)?)?;
            }
        }
        Op::Fft {
            re,
            im,
            dir,
            scale,
            part,
        } => {
            // y = scale * A x with A = F or conj(F); the adjoint is scale * A^H.
            let zeros = Tensor::zeros(g.shape());
            let (gr, gi) = match part {
                FftPart::Re => (g.clone(), zeros),
                FftPart::Im => (zeros, g.clone()),
            };
            let adjoint = match dir {
                Direction::Forward => Direction::InverseUnscaled,
                Direction::InverseUnscaled => Direction::Forward,
            };
            let back = fft::transform2d(&gr, &gi, adjoint)?;
            accumulate(nodes, grads, *re, back.re.scale(*scale))?;
            if let Some(im) = im {
                accumulate(nodes, grads, *im, back.im.scale(*scale))?;
            }
        }
        Op::Gather(x, idx) => {
            let mut d = Tensor::zeros(val(*x).shape());
            for (k, &i) in idx.iter().enumerate() {
                d.data_mut()[i] += g.data()[k];
            }
            accumulate(nodes, grads, *x, d)?;
        }
        Op::Attention { q, k, v, scale } => {
            let (dq, dk, dv) = attention_backward(&val(*q), &val(*k), &val(*v), *scale, g);
            accumulate(nodes, grads, *q, dq)?;
            accumulate(nodes, grads, *k, dk)?;
            accumulate(nodes, grads, *v, dv)?;
        }
    }
    Ok(())
}

/// Softmax-normalized scores of query `i` against all keys of batch `b`.
fn attention_row(q: &Tensor, k: &Tensor, b: usize, i: usize, scale: f64, row: &mut [f64]) {
    let [_, c, h, w] = q.shape().dims();
    let hw = h * w;
    row.iter_mut().for_each(|v| *v = 0.0);
    for ch in 0..c {
        let qv = q.data()[(b * c + ch) * hw + i] * scale;
        let krow = &k.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
        for (r, kv) in row.iter_mut().zip(krow) {
            *r += qv * kv;
        }
    }
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut total = 0.0;
    for r in row.iter_mut() {
        *r = (*r - max).exp();
        total += *r;
    }
    row.iter_mut().for_each(|r| *r /= total);
}

/// Single-head spatial attention over the H*W positions:
/// `out[:, i] = sum_j softmax_j(scale * q_i . k_j) v[:, j]`.
/// Rows are streamed so memory stays O(C * H * W).
pub fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Result<Tensor> {
    ensure_same("attention", q.shape(), k.shape())?;
    ensure_same("attention", q.shape(), v.shape())?;
    let [n, c, h, w] = q.shape().dims();
    let hw = h * w;
    let mut out = Tensor::zeros(q.shape());
    let mut row = vec![0.0; hw];
    for b in 0..n {
        for i in 0..hw {
            attention_row(q, k, b, i, scale, &mut row);
            for ch in 0..c {
                let vrow = &v.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                let s: f64 = row.iter().zip(vrow).map(|(a, x)| a * x).sum();
                out.data_mut()[(b * c + ch) * hw + i] = s;
            }
        }
    }
    Ok(out)
}

/// The full `(N, 1, HW, HW)` attention matrix; only sensible for small maps.
pub fn attention_weights(q: &Tensor, k: &Tensor, scale: f64) -> Result<Tensor> {
    ensure_same("attention", q.shape(), k.shape())?;
    let [n, _, h, w] = q.shape().dims();
    let hw = h * w;
    let mut out = Tensor::zeros(Shape::new(n, 1, hw, hw));
    for b in 0..n {
        for i in 0..hw {
            let base = (b * hw + i) * hw;
            attention_row(q, k, b, i, scale, &mut out.data_mut()[base..base + hw]);
        }
    }
    Ok(out)
}

fn attention_backward(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let [n, c, h, w] = q.shape().dims();
    let hw = h * w;
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut a = vec![0.0; hw];
    let mut da = vec![0.0; hw];
    for b in 0..n {
        for i in 0..hw {
            attention_row(q, k, b, i, scale, &mut a);
            da.iter_mut().for_each(|x| *x = 0.0);
            for ch in 0..c {
                let go = g.data()[(b * c + ch) * hw + i];
                let base = (b * c + ch) * hw;
                let vrow = &v.data()[base..base + hw];
                for j in 0..hw {
                    da[j] += go * vrow[j];
                }
                let dvrow = &mut dv.data_mut()[base..base + hw];
                for j in 0..hw {
                    dvrow[j] += a[j] * go;
                }
            }
            let dot: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
            // reuse da as the score gradient
            for j in 0..hw {
                da[j] = a[j] * (da[j] - dot) * scale;
            }
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let krow = &k.data()[base..base + hw];
                let s: f64 = da.iter().zip(krow).map(|(x, y)| x * y).sum();
                dq.data_mut()[base + i] += s;
                let qv = q.data()[base + i];
                let dkrow = &mut dk.data_mut()[base..base + hw];
                for j in 0..hw {
                    dkrow[j] += da[j] * qv;
                }
            }
        }
    }
    (dq, dk, dv)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Shape {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn unary(self, kind: Unary) -> Var<'t> {
        let x = self.value();
        let out = match kind {
            Unary::Relu => {
                let gap = x.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
                self.tape.note_kink(gap);
                tensor::relu(&x)
            }
            Unary::Silu => tensor::silu(&x),
            Unary::Sigmoid => tensor::sigmoid(&x),
            Unary::Exp => x.map(f64::exp),
            Unary::Log => x.map(f64::ln),
            Unary::Sqrt => x.map(f64::sqrt),
            Unary::Atan => x.map(f64::atan),
            Unary::Square => x.map(|v| v * v),
        };
        self.tape.push(out, Op::Unary(kind, self.id), self.requires_grad())
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Unary::Relu)
    }
    pub fn silu(self) -> Var<'t> {
        self.unary(Unary::Silu)
    }
    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }
    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }
    pub fn ln(self) -> Var<'t> {
        self.unary(Unary::Log)
    }
    pub fn sqrt(self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }
    pub fn atan(self) -> Var<'t> {
        self.unary(Unary::Atan)
    }
    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Square)
    }

    fn binary(self, other: Var<'t>, kind: Binary) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let out = match kind {
            Binary::Add => a.add(&b)?,
            Binary::Sub => a.sub(&b)?,
            Binary::Mul => a.mul(&b)?,
            Binary::Div => tensor::broadcast_binary(&a, &b, "div", |x, y| x / y)?,
            Binary::Max | Binary::Min => {
                ensure_same("max/min", a.shape(), b.shape())?;
                let gap = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .fold(f64::INFINITY, |m, (x, y)| m.min((x - y).abs()));
                self.tape.note_kink(gap);
                if kind == Binary::Max {
                    a.zip_map(&b, "max", |x, y| if x >= y { x } else { y })?
                } else {
                    a.zip_map(&b, "min", |x, y| if x <= y { x } else { y })?
                }
            }
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, Op::Binary(kind, self.id, other.id), rg))
    }

    /// Broadcasting add: each dim of either side is 1 or the output dim.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add)
    }
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub)
    }
    /// Broadcasting Hadamard product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul)
    }
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Div)
    }
    /// Element-wise maximum; ties route the gradient to `self`.
    pub fn maximum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Max)
    }
    pub fn minimum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Min)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let out = self.value().scale(s);
        self.tape.push(out, Op::Scale(self.id, s), self.requires_grad())
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let out = self.value().map(|v| v + s);
        self.tape.push(out, Op::Offset(self.id), self.requires_grad())
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let x = self.value();
        let gap = x
            .data()
            .iter()
            .fold(f64::INFINITY, |m, &v| m.min((v - lo).abs()).min((v - hi).abs()));
        self.tape.note_kink(gap);
        let out = x.map(|v| v.clamp(lo, hi));
        self.tape.push(out, Op::Clamp(self.id, lo, hi), self.requires_grad())
    }

    /// A copy that blocks gradient flow.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    pub fn sum(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push(out, Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over H and W: `(N, C, H, W) -> (N, C, 1, 1)`.
    pub fn sum_spatial(self) -> Var<'t> {
        let x = self.value();
        let [n, c, h, w] = x.shape().dims();
        let hw = h * w;
        let data = (0..n * c).map(|bc| x.data()[bc * hw..(bc + 1) * hw].iter().sum()).collect();
        let out = Tensor::new(Shape::new(n, c, 1, 1), data).expect("valid shape");
        self.tape.push(out, Op::SumSpatial(self.id), self.requires_grad())
    }

    pub fn reshape(self, dims: [usize; 4]) -> Result<Var<'t>> {
        let out = self.value().reshape(dims)?;
        Ok(self.tape.push(out, Op::Reshape(self.id), self.requires_grad()))
    }

    pub fn transpose_last2(self) -> Var<'t> {
        let out = self.value().transpose_last2();
        self.tape.push(out, Op::TransposeLast2(self.id), self.requires_grad())
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let out = tensor::matmul_batched(&self.value(), &other.value())?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, Op::Matmul(self.id, other.id), rg))
    }

    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero vars".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = tensor::concat_channels(&refs)?;
        let rg = parts.iter().any(|p| p.requires_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.push(out, Op::Concat(ids), rg))
    }

    pub fn slice_channels(self, start: usize, len: usize) -> Result<Var<'t>> {
        let out = self.value().slice_channels(start, len)?;
        Ok(self.tape.push(out, Op::SliceChannels(self.id, start), self.requires_grad()))
    }

    pub fn split_channels(self, parts: &[usize]) -> Result<Vec<Var<'t>>> {
        let total: usize = parts.iter().sum();
        if total != self.shape().c() {
            return Err(Error::Dimension {
                op: "split_channels",
                msg: format!("parts sum to {total}, tensor has {} channels", self.shape().c()),
            });
        }
        let mut start = 0;
        parts
            .iter()
            .map(|&len| {
                let v = self.slice_channels(start, len);
                start += len;
                v
            })
            .collect()
    }

    /// Output channel `i` is input channel `perm[i]`.
    pub fn permute_channels(self, perm: Vec<usize>) -> Result<Var<'t>> {
        let c = self.shape().c();
        let mut seen = vec![false; c];
        if perm.len() != c || !perm.iter().all(|&p| p < c && !std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(format!("not a permutation of {c} channels")));
        }
        let out = tensor::permute_channels(&self.value(), &perm);
        Ok(self.tape.push(out, Op::PermuteChannels(self.id, perm), self.requires_grad()))
    }

    pub fn channel_shuffle(self, groups: usize) -> Result<Var<'t>> {
        let c = self.shape().c();
        if groups == 0 || c % groups != 0 {
            return Err(Error::Divisibility {
                op: "channel_shuffle",
                channels: c,
                groups,
            });
        }
        self.permute_channels((0..c).map(|o| tensor::shuffle_source(o, c, groups)).collect())
    }

    pub fn softmax(self, axis: SoftmaxAxis) -> Var<'t> {
        let out = tensor::softmax(&self.value(), axis);
        self.tape.push(out, Op::Softmax(self.id, axis), self.requires_grad())
    }

    /// Channel layer norm; `gamma`, `beta` are `(1, C, 1, 1)`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (g, b) = (gamma.value(), beta.value());
        let res = tensor::layer_norm_full(&self.value(), g.data(), b.data(), eps)?;
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat: res.xhat,
            inv_std: res.inv_std,
        };
        Ok(self.tape.push(res.out, op, rg))
    }

    /// Batch norm; returns the output and the statistics used.
    pub fn batch_norm(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        running: &conv::BatchNormStats,
        mode: NormMode,
        eps: f64,
    ) -> Result<(Var<'t>, Vec<f64>, Vec<f64>)> {
        let (g, b) = (gamma.value(), beta.value());
        let res = conv::batch_norm_full(&self.value(), g.data(), b.data(), running, mode, eps)?;
        let (mean, var) = (res.mean.clone(), res.var.clone());
        let out = res.out.clone();
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let op = Op::BatchNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            saved: Box::new(res),
            mode,
        };
        Ok((self.tape.push(out, op, rg), mean, var))
    }

    pub fn global_pool(self, kind: PoolKind) -> Var<'t> {
        let x = self.value();
        let (out, arg) = tensor::global_pool_full(&x, kind);
        match kind {
            PoolKind::Average => self.tape.push(out, Op::GlobalAvg(self.id), self.requires_grad()),
            PoolKind::Max => {
                let hw = x.shape().spatial();
                if hw > 1 {
                    let mut gap = f64::INFINITY;
                    for (bc, &best) in arg.iter().enumerate() {
                        let lane = &x.data()[bc * hw..(bc + 1) * hw];
                        for (i, &v) in lane.iter().enumerate() {
                            if i != best {
                                gap = gap.min(lane[best] - v);
                            }
                        }
                    }
                    self.tape.note_kink(gap);
                }
                self.tape.push(out, Op::GlobalMax(self.id, arg), self.requires_grad())
            }
        }
    }

    /// Convolution with `weight (C_out, C_in/groups, k, k)` and `bias (1, C_out, 1, 1)`.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, geo: ConvGeometry) -> Result<Var<'t>> {
        let bv = bias.map(|b| b.value());
        let out = conv::conv2d_raw(&self.value(), &weight.value(), bv.as_ref().map(|b| b.data()), geo)?;
        let rg = self.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        let op = Op::Conv {
            x: self.id,
            w: weight.id,
            b: bias.map(|b| b.id),
            geo,
        };
        Ok(self.tape.push(out, op, rg))
    }

    pub fn deform_conv2d(
        self,
        offsets: Var<'t>,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        geo: ConvGeometry,
    ) -> Result<Var<'t>> {
        let bv = bias.map(|b| b.value());
        let (out, gap) = conv::deform_conv2d_raw(
            &self.value(),
            &offsets.value(),
            &weight.value(),
            bv.as_ref().map(|b| b.data()),
            geo,
        )?;
        if offsets.requires_grad() {
            self.tape.note_kink(gap);
        }
        let rg = self.requires_grad()
            || offsets.requires_grad()
            || weight.requires_grad()
            || bias.is_some_and(|b| b.requires_grad());
        let op = Op::Deform {
            x: self.id,
            off: offsets.id,
            w: weight.id,
            b: bias.map(|b| b.id),
            geo,
        };
        Ok(self.tape.push(out, op, rg))
    }

    /// Picks elements by flat index into a `(1, 1, 1, len)` vector.
    pub fn gather(self, indices: Vec<usize>) -> Result<Var<'t>> {
        let x = self.value();
        if indices.is_empty() || indices.iter().any(|&i| i >= x.numel()) {
            return Err(Error::InvalidArgument("gather index out of range or empty".into()));
        }
        let data = indices.iter().map(|&i| x.data()[i]).collect();
        let out = Tensor::new(Shape::new(1, 1, 1, indices.len()), data)?;
        Ok(self.tape.push(out, Op::Gather(self.id, indices), self.requires_grad()))
    }

    /// Fused single-head spatial attention (see [`attention_forward`]).
    pub fn attention(self, k: Var<'t>, v: Var<'t>, scale: f64) -> Result<Var<'t>> {
        let out = attention_forward(&self.value(), &k.value(), &v.value(), scale)?;
        let rg = self.requires_grad() || k.requires_grad() || v.requires_grad();
        let op = Op::Attention {
            q: self.id,
            k: k.id,
            v: v.id,
            scale,
        };
        Ok(self.tape.push(out, op, rg))
    }
}

/// Complex value on a tape as a pair of real vars.
#[derive(Clone, Copy, Debug)]
pub struct ComplexVar<'t> {
    pub re: Var<'t>,
    pub im: Option<Var<'t>>,
}

impl<'t> ComplexVar<'t> {
    pub fn real(re: Var<'t>) -> Self {
        ComplexVar { re, im: None }
    }

    fn im_or_zeros(&self) -> Var<'t> {
        self.im
            .unwrap_or_else(|| self.re.tape.constant(Tensor::zeros(self.re.shape())))
    }

    fn transform(&self, dir: Direction, scale: f64) -> Result<ComplexVar<'t>> {
        let tape = self.re.tape;
        let re_v = self.re.value();
        let im_v = self
            .im
            .map(|v| v.value())
            .unwrap_or_else(|| Rc::new(Tensor::zeros(re_v.shape())));
        let out = fft::transform2d(&re_v, &im_v, dir)?;
        let rg = self.re.requires_grad() || self.im.is_some_and(|v| v.requires_grad());
        let op = |part| Op::Fft {
            re: self.re.id,
            im: self.im.map(|v| v.id),
            dir,
            scale,
            part,
        };
        let re = tape.push(out.re.scale(scale), op(FftPart::Re), rg);
        let im = tape.push(out.im.scale(scale), op(FftPart::Im), rg);
        Ok(ComplexVar { re, im: Some(im) })
    }

    /// Unnormalized forward 2D DFT.
    pub fn fft2d(&self) -> Result<ComplexVar<'t>> {
        self.transform(Direction::Forward, 1.0)
    }

    /// Inverse 2D DFT with the `1/(H*W)` factor.
    pub fn ifft2d(&self) -> Result<ComplexVar<'t>> {
        let hw = self.re.shape().spatial() as f64;
        self.transform(Direction::InverseUnscaled, 1.0 / hw)
    }

    /// Element-wise complex product, optionally with `conj(rhs)`.
    pub fn mul(&self, rhs: &ComplexVar<'t>, conj_rhs: bool) -> Result<ComplexVar<'t>> {
        let (a, b) = (self.re, self.im_or_zeros());
        let (c, d) = (rhs.re, rhs.im_or_zeros());
        let d = if conj_rhs { d.scale(-1.0) } else { d };
        let re = a.mul(c)?.sub(b.mul(d)?)?;
        let im = a.mul(d)?.add(b.mul(c)?)?;
        Ok(ComplexVar { re, im: Some(im) })
    }

    pub fn split_channels(&self, parts: &[usize]) -> Result<Vec<ComplexVar<'t>>> {
        let re = self.re.split_channels(parts)?;
        let im = self.im_or_zeros().split_channels(parts)?;
        Ok(re
            .into_iter()
            .zip(im)
            .map(|(re, im)| ComplexVar { re, im: Some(im) })
            .collect())
    }

    pub fn concat(parts: &[ComplexVar<'t>]) -> Result<ComplexVar<'t>> {
        let re: Vec<Var<'t>> = parts.iter().map(|p| p.re).collect();
        let im: Vec<Var<'t>> = parts.iter().map(|p| p.im_or_zeros()).collect();
        Ok(ComplexVar {
            re: Var::concat(&re)?,
            im: Some(Var::concat(&im)?),
        })
    }

    /// The real part; with `imag_tol` set, fails if any `|im|` exceeds it.
    pub fn take_real(&self, imag_tol: Option<f64>) -> Result<Var<'t>> {
        if let (Some(tol), Some(im)) = (imag_tol, self.im) {
            let max_imag = im.value().max_abs();
            if max_imag > tol || !max_imag.is_finite() {
                return Err(Error::ImaginaryResidue { max_imag, tol });
            }
        }
        Ok(self.re)
    }

    pub fn max_abs_imag(&self) -> f64 {
        self.im.map_or(0.0, |v| v.value().max_abs())
    }
}
