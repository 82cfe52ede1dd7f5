use super::FreDFTConfig;
use crate::autodiff::Var;
use crate::conv::ConvSpec;
use crate::error::Result;
use crate::nn::{Activation, Conv2d, ConvBnAct, Ctx, ParamBuilder};

/// Local feature enhancement: a 1x1 stem, four parallel 3x3 branches
/// (standard, dilated, deformable, depthwise), channel shuffle across the
/// branches, 1x1 projection and a residual.
#[derive(Clone, Debug)]
pub struct Lfem {
    pub channels: usize,
    pub stem: ConvBnAct,
    pub branches: [ConvBnAct; 4],
    pub proj: Conv2d,
}

impl Lfem {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cfg: &FreDFTConfig) -> Result<Self> {
        let c = cfg.channels;
        let mut pb = pb.scope(name);
        let silu = Activation::Silu;
        let deform = if cfg.deformable {
            ConvSpec::deformable(c, c, 3)
        } else {
            ConvSpec::standard(c, c, 3)
        };
        Ok(Lfem {
            channels: c,
            stem: ConvBnAct::new(&mut pb, "stem", ConvSpec::pointwise(c, c), silu)?,
            branches: [
                ConvBnAct::new(&mut pb, "conv", ConvSpec::standard(c, c, 3), silu)?,
                ConvBnAct::new(&mut pb, "dilated", ConvSpec::dilated(c, c, 3, cfg.dilation), silu)?,
                ConvBnAct::new(&mut pb, "deform", deform, silu)?,
                ConvBnAct::new(&mut pb, "depthwise", ConvSpec::depthwise(c, 3), silu)?,
            ],
            proj: Conv2d::new(&mut pb, "proj", ConvSpec::pointwise(4 * c, c))?,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let s = self.stem.forward(ctx, x)?;
        let ys = self
            .branches
            .iter()
            .map(|b| b.forward(ctx, s))
            .collect::<Result<Vec<_>>>()?;
        let mixed = Var::concat(&ys)?.channel_shuffle(4)?;
        x.add(self.proj.forward(ctx, mixed)?)
    }
}
