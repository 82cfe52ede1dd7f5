use super::{check_pair, FreDFTConfig, VarPair};
use crate::autodiff::Var;
use crate::conv::ConvSpec;
use crate::error::Result;
use crate::nn::{Activation, Conv2d, ConvBnAct, Ctx, LayerNorm, ParamBuilder};
use crate::tensor::{ModalityPair, PoolKind, SoftmaxAxis};

#[derive(Clone, Debug)]
struct Side {
    b3: ConvBnAct,
    b4: ConvBnAct,
    /// Projects the two spatial maps `[m1, m2]` to `C` channels.
    p: Conv2d,
    g: Conv2d,
    g_norm: LayerNorm,
}

impl Side {
    fn new(pb: &mut ParamBuilder<'_>, name: &str, c: usize) -> Result<Self> {
        let mut pb = pb.scope(name);
        Ok(Side {
            b3: ConvBnAct::new(&mut pb, "b3", ConvSpec::pointwise(c, c), Activation::Silu)?,
            b4: ConvBnAct::new(&mut pb, "b4", ConvSpec::pointwise(c, c), Activation::Silu)?,
            p: Conv2d::new(&mut pb, "p", ConvSpec::pointwise(2, c))?,
            g: Conv2d::new(&mut pb, "g", ConvSpec::pointwise(c, c))?,
            g_norm: LayerNorm::new(&mut pb, "g_norm", c),
        })
    }
}

/// The per-modality branch outputs that the other modality consumes.
struct Branches<'t> {
    s1: Var<'t>,
    s2: Var<'t>,
    s3: Var<'t>,
    b4: Var<'t>,
}

/// Cross-modal global modeling.
///
/// For modality `A` with partner `B`:
/// `m1 = b4(A) (HW x C) . softmax_c(GAP(B))`, `m2` likewise with GMP,
/// `m3 = sum_hw b4(A) * softmax_hw(b3(B))`; then
/// `out_A = A + conv([m1, m2]) * sigmoid(LN(conv(m3)))`.
#[derive(Clone, Debug)]
pub struct Cgmm {
    pub channels: usize,
    rgb: Side,
    ir: Side,
}

impl Cgmm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cfg: &FreDFTConfig) -> Result<Self> {
        let mut pb = pb.scope(name);
        Ok(Cgmm {
            channels: cfg.channels,
            rgb: Side::new(&mut pb, "rgb", cfg.channels)?,
            ir: Side::new(&mut pb, "ir", cfg.channels)?,
        })
    }

    fn branches<'t>(ctx: &Ctx<'t, '_>, side: &Side, x: Var<'t>) -> Result<Branches<'t>> {
        Ok(Branches {
            s1: x.global_pool(PoolKind::Average).softmax(SoftmaxAxis::Channel),
            s2: x.global_pool(PoolKind::Max).softmax(SoftmaxAxis::Channel),
            s3: side.b3.forward(ctx, x)?.softmax(SoftmaxAxis::Spatial),
            b4: side.b4.forward(ctx, x)?,
        })
    }

    fn interact<'t>(ctx: &Ctx<'t, '_>, side: &Side, x: Var<'t>, own: &Branches<'t>, other: &Branches<'t>) -> Result<Var<'t>> {
        let [n, c, h, w] = x.shape().dims();
        let tokens = own.b4.reshape([n, 1, c, h * w])?.transpose_last2();
        let spatial = |s: Var<'t>| -> Result<Var<'t>> { tokens.matmul(s.reshape([n, 1, c, 1])?)?.reshape([n, 1, h, w]) };
        let m1 = spatial(other.s1)?;
        let m2 = spatial(other.s2)?;
        let m3 = own.b4.mul(other.s3)?.sum_spatial();
        let p = side.p.forward(ctx, Var::concat(&[m1, m2])?)?;
        let g = side.g_norm.forward(ctx, side.g.forward(ctx, m3)?)?.sigmoid();
        x.add(p.mul(g)?)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, pair: &VarPair<'t>) -> Result<VarPair<'t>> {
        check_pair("cgmm", pair, self.channels)?;
        let br = Self::branches(ctx, &self.rgb, pair.rgb)?;
        let bi = Self::branches(ctx, &self.ir, pair.ir)?;
        Ok(ModalityPair {
            rgb: Self::interact(ctx, &self.rgb, pair.rgb, &br, &bi)?,
            ir: Self::interact(ctx, &self.ir, pair.ir, &bi, &br)?,
        })
    }

    /// The gate `sigmoid(LN(conv(m3)))` applied to the RGB output.
    pub fn rgb_gate<'t>(&self, ctx: &Ctx<'t, '_>, pair: &VarPair<'t>) -> Result<Var<'t>> {
        check_pair("cgmm", pair, self.channels)?;
        let br = Self::branches(ctx, &self.rgb, pair.rgb)?;
        let bi = Self::branches(ctx, &self.ir, pair.ir)?;
        let m3 = br.b4.mul(bi.s3)?.sum_spatial();
        Ok(self.rgb.g_norm.forward(ctx, self.rgb.g.forward(ctx, m3)?)?.sigmoid())
    }
}
