use serde::{Deserialize, Serialize};

use super::{check_pair, Attention, AttentionKind, Cgmm, FeedForward, FeedForwardKind, FreDFTConfig, Lfem, VarPair};
use crate::autodiff::Var;
use crate::conv::ConvSpec;
use crate::error::Result;
use crate::nn::{Conv2d, Ctx, ParamBuilder};
use crate::tensor::ModalityPair;

/// Which parts of the block are present. Without FDFAM the two modalities
/// are fused by element-wise addition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionLayout {
    pub lfem: bool,
    pub cgmm: bool,
    pub fdfam: bool,
    pub attention: AttentionKind,
    pub feed_forward: FeedForwardKind,
}

impl FusionLayout {
    pub const FULL: FusionLayout = FusionLayout {
        lfem: true,
        cgmm: true,
        fdfam: true,
        attention: AttentionKind::Frequency,
        feed_forward: FeedForwardKind::Frequency,
    };
    pub const ADDITION: FusionLayout = FusionLayout {
        lfem: false,
        cgmm: false,
        fdfam: false,
        ..Self::FULL
    };
    pub const FDFAM_ONLY: FusionLayout = FusionLayout {
        lfem: false,
        cgmm: false,
        ..Self::FULL
    };
    pub const LFEM_FDFAM: FusionLayout = FusionLayout {
        cgmm: false,
        ..Self::FULL
    };
    pub const CGMM_FDFAM: FusionLayout = FusionLayout {
        lfem: false,
        ..Self::FULL
    };
    pub const SPATIAL_ATTENTION: FusionLayout = FusionLayout {
        attention: AttentionKind::Spatial,
        ..Self::FULL
    };
    pub const MLP_FEED_FORWARD: FusionLayout = FusionLayout {
        feed_forward: FeedForwardKind::Mlp,
        ..Self::FULL
    };
}

impl Default for FusionLayout {
    fn default() -> Self {
        Self::FULL
    }
}

/// Frequency-domain feature aggregation:
/// `X_f = relu(conv1x1([FFL_rgb(A_rgb), FFL_ir(A_ir)]))` with `A = attention(x)`.
#[derive(Clone, Debug)]
pub struct Fdfam {
    pub attention: Attention,
    pub ffl_rgb: FeedForward,
    pub ffl_ir: FeedForward,
    pub fuse: Conv2d,
    channels: usize,
}

impl Fdfam {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cfg: &FreDFTConfig, layout: &FusionLayout) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let mut pb = pb.scope(name);
        Ok(Fdfam {
            attention: Attention::new(&mut pb, "attn", cfg, layout.attention)?,
            ffl_rgb: FeedForward::new(&mut pb, "ffl_rgb", cfg, layout.feed_forward)?,
            ffl_ir: FeedForward::new(&mut pb, "ffl_ir", cfg, layout.feed_forward)?,
            fuse: Conv2d::new(&mut pb, "fuse", ConvSpec::pointwise(2 * c, c))?,
            channels: c,
        })
    }

    /// Returns the attention output pair and the fused map.
    pub fn forward_stages<'t>(&self, ctx: &Ctx<'t, '_>, pair: &VarPair<'t>) -> Result<(VarPair<'t>, Var<'t>)> {
        check_pair("fdfam", pair, self.channels)?;
        let a = self.attention.forward(ctx, pair)?;
        let r = self.ffl_rgb.forward(ctx, a.rgb)?;
        let i = self.ffl_ir.forward(ctx, a.ir)?;
        let fused = self.fuse.forward(ctx, Var::concat(&[r, i])?)?.relu();
        Ok((a, fused))
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, pair: &VarPair<'t>) -> Result<Var<'t>> {
        Ok(self.forward_stages(ctx, pair)?.1)
    }
}

/// Intermediate results of one block evaluation; absent stages are `None`.
pub struct Stages<'t> {
    pub lfem: Option<VarPair<'t>>,
    pub cgmm: Option<VarPair<'t>>,
    pub attention: Option<VarPair<'t>>,
    pub fused: Var<'t>,
}

/// One fusion block: per-modality LFEM, joint CGMM, then FDFAM.
#[derive(Clone, Debug)]
pub struct FreDft {
    pub layout: FusionLayout,
    pub channels: usize,
    pub lfem: Option<ModalityPair<Lfem>>,
    pub cgmm: Option<Cgmm>,
    pub fdfam: Option<Fdfam>,
}

impl FreDft {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cfg: &FreDFTConfig, layout: FusionLayout) -> Result<Self> {
        cfg.validate()?;
        let mut pb = pb.scope(name);
        let lfem = if layout.lfem {
            Some(ModalityPair {
                rgb: Lfem::new(&mut pb, "lfem_rgb", cfg)?,
                ir: Lfem::new(&mut pb, "lfem_ir", cfg)?,
            })
        } else {
            None
        };
        let cgmm = layout.cgmm.then(|| Cgmm::new(&mut pb, "cgmm", cfg)).transpose()?;
        let fdfam = layout.fdfam.then(|| Fdfam::new(&mut pb, "fdfam", cfg, &layout)).transpose()?;
        Ok(FreDft {
            layout,
            channels: cfg.channels,
            lfem,
            cgmm,
            fdfam,
        })
    }

    pub fn forward_stages<'t>(&self, ctx: &Ctx<'t, '_>, pair: &VarPair<'t>) -> Result<Stages<'t>> {
        check_pair("fredft", pair, self.channels)?;
        let mut x = ModalityPair { rgb: pair.rgb, ir: pair.ir };
        let lfem = match &self.lfem {
            Some(l) => {
                x = ModalityPair {
                    rgb: l.rgb.forward(ctx, x.rgb)?,
                    ir: l.ir.forward(ctx, x.ir)?,
                };
                Some(ModalityPair { rgb: x.rgb, ir: x.ir })
            }
            None => None,
        };
        let cgmm = match &self.cgmm {
            Some(c) => {
                x = c.forward(ctx, &x)?;
                Some(ModalityPair { rgb: x.rgb, ir: x.ir })
            }
            None => None,
        };
        let (attention, fused) = match &self.fdfam {
            Some(f) => {
                let (a, fused) = f.forward_stages(ctx, &x)?;
                (Some(a), fused)
            }
            None => (None, x.rgb.add(x.ir)?),
        };
        Ok(Stages {
            lfem,
            cgmm,
            attention,
            fused,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, pair: &VarPair<'t>) -> Result<Var<'t>> {
        Ok(self.forward_stages(ctx, pair)?.fused)
    }
}
