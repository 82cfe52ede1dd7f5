use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::FreDFTConfig;
use crate::autodiff::{ComplexVar, Var};
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, LayerNorm, ParamBuilder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedForwardKind {
    /// Mixed-scale frequency feed-forward (FDFFL).
    Frequency,
    /// `1x1 -> ReLU -> 1x1` with a 4x hidden width.
    Mlp,
}

/// Depthwise kernel sizes of the three FDFFL branches, in branch order.
pub const FDFFL_KERNELS: [usize; 3] = [3, 5, 7];

/// Channel ranges of the branch-concatenated spectrum (`3 * ce` channels,
/// branch-major) that feed each mixed path. Path `j` takes chunk `j` of every
/// branch, so each chunk is used exactly once.
pub fn fdffl_routing(ce: usize) -> Vec<Vec<Range<usize>>> {
    let chunk = ce / 3;
    (0..3)
        .map(|j| (0..3).map(|b| b * ce + j * chunk..b * ce + (j + 1) * chunk).collect())
        .collect()
}

/// Frequency-domain feed-forward layer.
///
/// `X_l = LN(x)`; branch `b` is `relu(dw_{k_b}(conv1x1(X_l)))` in the
/// frequency domain, cut into three channel chunks; mixed path `j` gathers
/// chunk `j` of each branch, returns to the spatial domain (real part), and
/// applies `relu(dw_{k_j})`. The paths are concatenated, projected back to
/// `C` channels and added to `x`.
#[derive(Clone, Debug)]
pub struct Fdffl {
    pub channels: usize,
    pub expanded: usize,
    norm: LayerNorm,
    expand: Vec<Conv2d>,
    branch_dw: Vec<Conv2d>,
    path_dw: Vec<Conv2d>,
    proj: Conv2d,
}

impl Fdffl {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cfg: &FreDFTConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, ce) = (cfg.channels, cfg.expanded());
        let mut pb = pb.scope(name);
        let norm = LayerNorm::new(&mut pb, "norm", c);
        let mut expand = Vec::new();
        let mut branch_dw = Vec::new();
        let mut path_dw = Vec::new();
        for (i, &k) in FDFFL_KERNELS.iter().enumerate() {
            expand.push(Conv2d::new(&mut pb, &format!("expand{i}"), ConvSpec::pointwise(c, ce))?);
            branch_dw.push(Conv2d::new(&mut pb, &format!("branch_dw{i}"), ConvSpec::depthwise(ce, k))?);
        }
        for (j, &k) in FDFFL_KERNELS.iter().enumerate() {
            path_dw.push(Conv2d::new(&mut pb, &format!("path_dw{j}"), ConvSpec::depthwise(ce, k))?);
        }
        let proj = Conv2d::new(&mut pb, "proj", ConvSpec::pointwise(3 * ce, c))?;
        Ok(Fdffl {
            channels: c,
            expanded: ce,
            norm,
            expand,
            branch_dw,
            path_dw,
            proj,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let xl = self.norm.forward(ctx, x)?;
        let mut spectra = Vec::with_capacity(3);
        for (expand, dw) in self.expand.iter().zip(&self.branch_dw) {
            let y = dw.forward(ctx, expand.forward(ctx, xl)?)?.relu();
            spectra.push(ComplexVar::real(y).fft2d()?);
        }
        let all = ComplexVar::concat(&spectra)?;
        let mut paths = Vec::with_capacity(3);
        for (ranges, dw) in fdffl_routing(self.expanded).iter().zip(&self.path_dw) {
            let chunks = ranges
                .iter()
                .map(|r| {
                    Ok(ComplexVar {
                        re: all.re.slice_channels(r.start, r.len())?,
                        im: all.im.map(|im| im.slice_channels(r.start, r.len())).transpose()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mixed = ComplexVar::concat(&chunks)?.ifft2d()?.take_real(None)?;
            paths.push(dw.forward(ctx, mixed)?.relu());
        }
        x.add(self.proj.forward(ctx, Var::concat(&paths)?)?)
    }
}

/// `x + conv1x1(relu(conv1x1(LN(x))))` with hidden width `4C`.
#[derive(Clone, Debug)]
pub struct MlpFfl {
    pub channels: usize,
    norm: LayerNorm,
    fc1: Conv2d,
    fc2: Conv2d,
}

impl MlpFfl {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cfg: &FreDFTConfig) -> Result<Self> {
        let c = cfg.channels;
        let mut pb = pb.scope(name);
        Ok(MlpFfl {
            channels: c,
            norm: LayerNorm::new(&mut pb, "norm", c),
            fc1: Conv2d::new(&mut pb, "fc1", ConvSpec::pointwise(c, 4 * c))?,
            fc2: Conv2d::new(&mut pb, "fc2", ConvSpec::pointwise(4 * c, c))?,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(ctx, self.norm.forward(ctx, x)?)?.relu();
        x.add(self.fc2.forward(ctx, h)?)
    }
}

#[derive(Clone, Debug)]
pub enum FeedForward {
    Frequency(Fdffl),
    Mlp(MlpFfl),
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cfg: &FreDFTConfig, kind: FeedForwardKind) -> Result<Self> {
        Ok(match kind {
            FeedForwardKind::Frequency => FeedForward::Frequency(Fdffl::new(pb, name, cfg)?),
            FeedForwardKind::Mlp => FeedForward::Mlp(MlpFfl::new(pb, name, cfg)?),
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let c = match self {
            FeedForward::Frequency(f) => f.channels,
            FeedForward::Mlp(f) => f.channels,
        };
        if x.shape().c() != c {
            return Err(Error::Dimension {
                op: "feed_forward",
                msg: format!("expected {c} channels, got {}", x.shape().c()),
            });
        }
        match self {
            FeedForward::Frequency(f) => f.forward(ctx, x),
            FeedForward::Mlp(f) => f.forward(ctx, x),
        }
    }
}
