//! Named parameters, initialization and the layers the fusion modules are
//! built from.
//!
//! Parameters live in a [`ParamStore`]; layers only hold [`ParamId`]s. A
//! forward pass reads them through a [`Ctx`], which puts each parameter on
//! the tape the first time it is used.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gradcheck, kink_free_points, project, GradCheckConfig, GradReport, Grads, Tape, Var};
use crate::conv::{BatchNormStats, ConvKind, ConvSpec, NormMode, BATCH_NORM_EPS, BATCH_NORM_MOMENTUM};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor, LAYER_NORM_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Convolution kernel; the only kind that receives weight decay.
    Weight,
    Bias,
    /// Normalization scale or shift.
    Affine,
    /// Running statistic; not trained.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: String, kind: ParamKind, value: Tensor) -> ParamId {
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, kind, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.kind.trainable()).map(|(id, _)| id).collect()
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "ParamStore::set",
                lhs: p.value.shape(),
                rhs: value.shape(),
            });
        }
        p.value = value;
        Ok(())
    }

    /// Zeroes every parameter whose name starts with `prefix`; returns how
    /// many were touched.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.value = Tensor::zeros(p.value.shape());
            n += 1;
        }
        n
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate], momentum: f64) {
        for u in updates {
            let mut stats = BatchNormStats {
                mean: self.get(u.mean).data().to_vec(),
                var: self.get(u.var).data().to_vec(),
            };
            crate::conv::update_running_stats(&mut stats, &u.batch_mean, &u.batch_var, momentum);
            self.get_mut(u.mean).data_mut().copy_from_slice(&stats.mean);
            self.get_mut(u.var).data_mut().copy_from_slice(&stats.var);
        }
    }
}

/// Creates parameters under a dotted name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A builder whose names are prefixed with `name.`.
    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn add(&mut self, name: &str, kind: ParamKind, value: Tensor) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, kind, value)
    }

    /// Kaiming-uniform: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn kaiming(&mut self, name: &str, shape: Shape) -> ParamId {
        let [_, cin, kh, kw] = shape.dims();
        let bound = (6.0 / (cin * kh * kw) as f64).sqrt();
        let value = Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound));
        self.add(name, ParamKind::Weight, value)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
}

/// Batch statistics produced in train mode, applied after the step.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// One forward pass: binds parameters to tape vars and collects batch-norm
/// statistics.
pub struct Ctx<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    mode: NormMode,
    bound: RefCell<HashMap<ParamId, Var<'t>>>,
    bn_updates: RefCell<Vec<BnUpdate>>,
    frozen: bool,
}

impl<'t, 's> Ctx<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore, mode: NormMode) -> Self {
        Ctx {
            tape,
            store,
            mode,
            bound: RefCell::new(HashMap::new()),
            bn_updates: RefCell::new(Vec::new()),
            frozen: false,
        }
    }

    /// A context whose parameters are recorded as constants; inference only.
    pub fn inference(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Ctx {
            frozen: true,
            ..Ctx::new(tape, store, NormMode::Eval)
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.bound.borrow().get(&id) {
            return *v;
        }
        let p = self.store.param(id);
        let v = if p.kind.trainable() && !self.frozen {
            self.tape.var(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        self.bound.borrow_mut().insert(id, v);
        v
    }

    /// Uses `var` in place of the stored value of `id`.
    pub fn bind(&self, id: ParamId, var: Var<'t>) {
        self.bound.borrow_mut().insert(id, var);
    }

    /// Gradients of every trainable parameter used in this pass.
    pub fn param_grads(&self, grads: &Grads) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .bound
            .borrow()
            .iter()
            .filter(|(id, _)| self.store.param(**id).kind.trainable())
            .filter_map(|(id, v)| grads.get(*v).map(|g| (*id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn record_bn(&self, update: BnUpdate) {
        self.bn_updates.borrow_mut().push(update);
    }

    pub fn take_bn_updates(&self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Silu,
    Sigmoid,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.relu(),
            Activation::Silu => x.silu(),
            Activation::Sigmoid => x.sigmoid(),
        }
    }
}

fn check_channels(op: &'static str, x: Shape, expected: usize) -> Result<()> {
    if x.c() != expected {
        return Err(Error::Dimension {
            op,
            msg: format!("expected {expected} input channels, got {}", x.c()),
        });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let mut pb = pb.scope(name);
        let weight = pb.kaiming("weight", spec.weight_shape());
        let bias = spec
            .has_bias
            .then(|| pb.add("bias", ParamKind::Bias, Tensor::zeros(Shape::new(1, spec.out_channels, 1, 1))));
        Ok(Conv2d { spec, weight, bias })
    }

    /// A layer whose weights and bias start at zero.
    pub fn zeros(pb: &mut ParamBuilder<'_>, name: &str, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let mut pb = pb.scope(name);
        let weight = pb.add("weight", ParamKind::Weight, Tensor::zeros(spec.weight_shape()));
        let bias = spec
            .has_bias
            .then(|| pb.add("bias", ParamKind::Bias, Tensor::zeros(Shape::new(1, spec.out_channels, 1, 1))));
        Ok(Conv2d { spec, weight, bias })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        check_channels("conv2d", x.shape(), self.spec.in_channels)?;
        let b = self.bias.map(|b| ctx.param(b));
        x.conv2d(ctx.param(self.weight), b, self.spec.geometry())
    }
}

/// Deformable convolution with its own offset predictor (a standard conv of
/// the same kernel size producing `2 k^2` offset channels), zero-initialized
/// so the layer starts out as a standard convolution.
#[derive(Clone, Debug)]
pub struct DeformConv2d {
    pub spec: ConvSpec,
    pub offset: Conv2d,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl DeformConv2d {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        if spec.kind != ConvKind::Deformable || spec.stride != 1 {
            return Err(Error::InvalidArgument("DeformConv2d needs a stride-1 deformable spec".into()));
        }
        let mut pb = pb.scope(name);
        let k = spec.kernel;
        let offset_spec = ConvSpec {
            dilation: spec.dilation,
            ..ConvSpec::standard(spec.in_channels, 2 * k * k, k)
        };
        let offset = Conv2d::zeros(&mut pb, "offset", offset_spec)?;
        let weight = pb.kaiming("weight", spec.weight_shape());
        let bias = spec
            .has_bias
            .then(|| pb.add("bias", ParamKind::Bias, Tensor::zeros(Shape::new(1, spec.out_channels, 1, 1))));
        Ok(DeformConv2d {
            spec,
            offset,
            weight,
            bias,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        check_channels("deform_conv2d", x.shape(), self.spec.in_channels)?;
        let off = self.offset.forward(ctx, x)?;
        let b = self.bias.map(|b| ctx.param(b));
        x.deform_conv2d(off, ctx.param(self.weight), b, self.spec.geometry())
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize) -> Self {
        let mut pb = pb.scope(name);
        let s = Shape::new(1, channels, 1, 1);
        BatchNorm2d {
            channels,
            gamma: pb.add("gamma", ParamKind::Affine, Tensor::ones(s)),
            beta: pb.add("beta", ParamKind::Affine, Tensor::zeros(s)),
            running_mean: pb.add("running_mean", ParamKind::Buffer, Tensor::zeros(s)),
            running_var: pb.add("running_var", ParamKind::Buffer, Tensor::ones(s)),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        check_channels("batch_norm", x.shape(), self.channels)?;
        let running = BatchNormStats {
            mean: ctx.store().get(self.running_mean).data().to_vec(),
            var: ctx.store().get(self.running_var).data().to_vec(),
        };
        let mode = ctx.mode();
        let (y, mean, var) = x.batch_norm(ctx.param(self.gamma), ctx.param(self.beta), &running, mode, BATCH_NORM_EPS)?;
        if mode == NormMode::Train {
            ctx.record_bn(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                batch_mean: mean,
                batch_var: var,
            });
        }
        Ok(y)
    }
}

/// Default running-statistics momentum, re-exported for trainers.
pub const BN_MOMENTUM: f64 = BATCH_NORM_MOMENTUM;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize) -> Self {
        let mut pb = pb.scope(name);
        let s = Shape::new(1, channels, 1, 1);
        LayerNorm {
            channels,
            gamma: pb.add("gamma", ParamKind::Affine, Tensor::ones(s)),
            beta: pb.add("beta", ParamKind::Affine, Tensor::zeros(s)),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        check_channels("layer_norm", x.shape(), self.channels)?;
        x.layer_norm(ctx.param(self.gamma), ctx.param(self.beta), LAYER_NORM_EPS)
    }
}

/// Convolution (no bias) followed by batch norm and an activation.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: ConvLayer,
    pub bn: BatchNorm2d,
    pub act: Activation,
}

/// Either convolution flavor, so [`ConvBnAct`] covers every LFEM branch.
#[derive(Clone, Debug)]
pub enum ConvLayer {
    Plain(Conv2d),
    Deformable(DeformConv2d),
}

impl ConvLayer {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, spec: ConvSpec) -> Result<Self> {
        Ok(match spec.kind {
            ConvKind::Deformable => ConvLayer::Deformable(DeformConv2d::new(pb, name, spec)?),
            _ => ConvLayer::Plain(Conv2d::new(pb, name, spec)?),
        })
    }

    pub fn spec(&self) -> &ConvSpec {
        match self {
            ConvLayer::Plain(c) => &c.spec,
            ConvLayer::Deformable(c) => &c.spec,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            ConvLayer::Plain(c) => c.forward(ctx, x),
            ConvLayer::Deformable(c) => c.forward(ctx, x),
        }
    }
}

impl ConvBnAct {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, spec: ConvSpec, act: Activation) -> Result<Self> {
        let mut pb = pb.scope(name);
        let conv = ConvLayer::new(&mut pb, "conv", spec.without_bias())?;
        let bn = BatchNorm2d::new(&mut pb, "bn", spec.out_channels);
        Ok(ConvBnAct { conv, bn, act })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.conv.forward(ctx, x)?;
        Ok(self.act.apply(self.bn.forward(ctx, y)?))
    }
}

fn scalar_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    f
}

/// Gradient check of a module with respect to its inputs and every
/// trainable parameter in `store`.
///
/// Inputs are drawn from `[-1, 1]` with seeds derived from `cfg.seed`.
/// Biases and normalization affines are redrawn around their stored values
/// at every point, since zero-initialized biases tend to sit exactly on a
/// ReLU kink. Draws that land within the kink margin are skipped. The loss
/// is a fixed random projection of the output.
pub fn gradcheck_module<F>(
    op: &str,
    store: &ParamStore,
    input_shapes: &[Shape],
    mode: NormMode,
    points: usize,
    cfg: &GradCheckConfig,
    forward: F,
) -> Result<GradReport>
where
    F: for<'t> Fn(&Ctx<'t, '_>, &[Var<'t>]) -> Result<Var<'t>>,
{
    let ids = store.trainable();
    let n_in = input_shapes.len();
    let f = scalar_fn(|tape, vars| {
        let ctx = Ctx::new(tape, store, mode);
        for (id, v) in ids.iter().zip(&vars[n_in..]) {
            ctx.bind(*id, *v);
        }
        let y = forward(&ctx, &vars[..n_in])?;
        project(tape, y)
    });
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed ^ 0x5eed);
    let candidates = std::iter::repeat_with(|| {
        let mut v: Vec<Tensor> = input_shapes
            .iter()
            .map(|&s| Tensor::rand_uniform(s, -1.0, 1.0, &mut rng))
            .collect();
        for &id in &ids {
            let p = store.param(id);
            let t = match p.kind {
                ParamKind::Bias => Tensor::rand_uniform(p.value.shape(), -0.5, 0.5, &mut rng),
                ParamKind::Affine => p.value.add(&Tensor::rand_uniform(p.value.shape(), -0.25, 0.25, &mut rng)).expect("same shape"),
                _ => p.value.clone(),
            };
            v.push(t);
        }
        v
    })
    .take(200);
    let chosen = kink_free_points(&f, candidates, points, cfg)?;
    if chosen.len() < points {
        return Err(Error::InvalidArgument(format!("{op}: could not find {points} kink-free points")));
    }
    let mut total: Option<GradReport> = None;
    for (i, inputs) in chosen.iter().enumerate() {
        let point_cfg = GradCheckConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        let r = gradcheck(op, &f, inputs, &point_cfg)?;
        total = Some(match total {
            None => r,
            Some(t) => t.merge(&r),
        });
    }
    Ok(total.expect("points >= 1"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn builder_store(seed: u64) -> (ParamStore, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn kaiming_bound_respected() {
        let (mut store, mut rng) = builder_store(1);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let c = Conv2d::new(&mut pb, "c", ConvSpec::standard(4, 8, 3)).unwrap();
        let bound = (6.0f64 / 36.0).sqrt();
        assert!(store.get(c.weight).data().iter().all(|v| v.abs() <= bound));
        assert!(store.get(c.bias.unwrap()).data().iter().all(|&v| v == 0.0));
        assert_eq!(store.param(c.weight).name, "c.weight");
    }

    #[test]
    fn deformable_starts_as_standard() {
        let (mut store, mut rng) = builder_store(2);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let d = DeformConv2d::new(&mut pb, "d", ConvSpec::deformable(2, 3, 3)).unwrap();
        let x = Tensor::rand_uniform(Shape::new(1, 2, 5, 5), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        let y = d.forward(&ctx, tape.constant(x.clone())).unwrap();
        let b = store.get(d.bias.unwrap()).data().to_vec();
        let expect = crate::conv::conv2d_raw(&x, store.get(d.weight), Some(&b), d.spec.geometry()).unwrap();
        assert!(y.value().max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn bn_updates_running_stats() {
        let (mut store, mut rng) = builder_store(4);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let bn = BatchNorm2d::new(&mut pb, "bn", 2);
        let x = Tensor::from_fn(Shape::new(2, 2, 2, 2), |[n, c, h, w]| (n + 2 * c + h * w) as f64);
        let updates = {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, NormMode::Train);
            bn.forward(&ctx, tape.constant(x.clone())).unwrap();
            ctx.take_bn_updates()
        };
        store.apply_bn_updates(&updates, BN_MOMENTUM);
        let m = store.get(bn.running_mean).data().to_vec();
        // channel 0 values: n + h*w over n in {0,1}, h,w in {0,1}: mean 0.75
        assert!((m[0] - 0.075).abs() < 1e-12, "{m:?}");
    }

    #[test]
    fn conv_bn_act_gradcheck() {
        let (mut store, mut rng) = builder_store(5);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let layer = ConvBnAct::new(&mut pb, "cba", ConvSpec::standard(2, 3, 3), Activation::Silu).unwrap();
        let cfg = GradCheckConfig::default();
        let r = gradcheck_module("conv_bn_silu", &store, &[Shape::new(2, 2, 4, 4)], NormMode::Train, 3, &cfg, |ctx, x| {
            layer.forward(ctx, x[0])
        })
        .unwrap();
        assert!(r.passed(cfg.tol), "{r:?}");
    }
}
