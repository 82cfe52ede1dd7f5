use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::head::{HeadLayout, CLASS_CHANNEL, OBJ_CHANNEL};
use crate::autodiff::Var;
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::fusion::{FreDFTConfig, FreDft, FusionLayout, Stages};
use crate::nn::{Activation, Conv2d, ConvBnAct, Ctx, ParamBuilder, ParamStore};
use crate::tensor::{ModalityPair, Shape, Tensor};

/// What sits between the backbones and the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// Both backbones fused by a FreDFT block with the given layout.
    Fused(FusionLayout),
    RgbOnly,
    IrOnly,
}

/// Rows of the module ablation, in table order.
pub const ABLATION_ROWS: [(&str, FusionLayout); 7] = [
    ("baseline_add", FusionLayout::ADDITION),
    ("fdfam", FusionLayout::FDFAM_ONLY),
    ("lfem_fdfam", FusionLayout::LFEM_FDFAM),
    ("cgmm_fdfam", FusionLayout::CGMM_FDFAM),
    ("full", FusionLayout::FULL),
    ("msda", FusionLayout::SPATIAL_ATTENTION),
    ("mlp_ffl", FusionLayout::MLP_FEED_FORWARD),
];

impl ModelVariant {
    pub const FUSED: ModelVariant = ModelVariant::Fused(FusionLayout::FULL);

    /// `fused_fredft`, `rgb_only`, `ir_only`, or an ablation row name.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "fused_fredft" => Ok(Self::FUSED),
            "rgb_only" => Ok(ModelVariant::RgbOnly),
            "ir_only" => Ok(ModelVariant::IrOnly),
            _ => ABLATION_ROWS
                .iter()
                .find(|(n, _)| *n == name)
                .map(|&(_, l)| ModelVariant::Fused(l))
                .ok_or_else(|| Error::InvalidArgument(format!("unknown model variant `{name}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelVariant::RgbOnly => "rgb_only",
            ModelVariant::IrOnly => "ir_only",
            ModelVariant::Fused(l) if *l == FusionLayout::FULL => "fused_fredft",
            ModelVariant::Fused(l) => ABLATION_ROWS.iter().find(|(_, r)| r == l).map_or("custom", |(n, _)| n),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub classes: usize,
    /// Square input size in pixels; must be divisible by 8.
    pub image_size: usize,
    /// Widths of the first two backbone stages; the third matches the
    /// fusion channel count.
    pub stage_widths: [usize; 2],
    pub prior: f64,
    /// Initial objectness and class probability of the head.
    pub prior_prob: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            classes: 2,
            image_size: 64,
            stage_widths: [8, 16],
            prior: 0.25,
            prior_prob: 0.01,
        }
    }
}

/// Three stride-2 `conv3x3 + BN + SiLU` stages.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stages: Vec<ConvBnAct>,
}

impl Backbone {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, input: usize, widths: [usize; 3]) -> Result<Self> {
        let mut pb = pb.scope(name);
        let mut cin = input;
        let mut stages = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            let spec = ConvSpec::standard(cin, w, 3).with_stride(2);
            stages.push(ConvBnAct::new(&mut pb, &format!("stage{i}"), spec, Activation::Silu)?);
            cin = w;
        }
        Ok(Backbone { stages })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.h() % 8 != 0 || s.w() % 8 != 0 {
            return Err(Error::Dimension {
                op: "backbone",
                msg: format!("image {}x{} is not divisible by 8", s.h(), s.w()),
            });
        }
        self.stages.iter().try_fold(x, |x, st| st.forward(ctx, x))
    }
}

/// Intermediate maps of one forward pass.
pub struct Features<'t> {
    pub backbone: ModalityPair<Option<Var<'t>>>,
    /// Present for fused variants.
    pub stages: Option<Stages<'t>>,
    /// Input to the head.
    pub neck: Var<'t>,
}

/// Toy dual-backbone detector with a single `1x1` dense head.
#[derive(Clone, Debug)]
pub struct Detector {
    pub variant: ModelVariant,
    pub config: DetectorConfig,
    pub fusion_config: FreDFTConfig,
    pub layout: HeadLayout,
    pub backbone_rgb: Option<Backbone>,
    pub backbone_ir: Option<Backbone>,
    pub fusion: Option<FreDft>,
    pub head: Conv2d,
}

impl Detector {
    /// Builds the model and its parameters. The fusion block runs on the
    /// `image_size / 8` grid, overriding `fusion.height` and `fusion.width`.
    pub fn new(variant: ModelVariant, config: &DetectorConfig, fusion: &FreDFTConfig, seed: u64) -> Result<(Self, ParamStore)> {
        if config.image_size == 0 || config.image_size % 8 != 0 || config.classes == 0 {
            return Err(Error::InvalidArgument(format!(
                "image_size {} must be a positive multiple of 8 and classes positive",
                config.image_size
            )));
        }
        if !(config.prior > 0.0 && config.prior_prob > 0.0 && config.prior_prob < 1.0) {
            return Err(Error::InvalidArgument("prior and prior_prob out of range".into()));
        }
        let grid = config.image_size / 8;
        let mut fcfg = fusion.clone();
        fcfg.height = grid;
        fcfg.width = grid;
        fcfg.validate()?;
        let c = fcfg.channels;
        let widths = [config.stage_widths[0], config.stage_widths[1], c];

        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let (use_rgb, use_ir) = match variant {
            ModelVariant::Fused(_) => (true, true),
            ModelVariant::RgbOnly => (true, false),
            ModelVariant::IrOnly => (false, true),
        };
        let backbone_rgb = use_rgb.then(|| Backbone::new(&mut pb, "backbone_rgb", 3, widths)).transpose()?;
        let backbone_ir = use_ir.then(|| Backbone::new(&mut pb, "backbone_ir", 1, widths)).transpose()?;
        let fusion = match variant {
            ModelVariant::Fused(layout) => Some(FreDft::new(&mut pb, "fusion", &fcfg, layout)?),
            _ => None,
        };
        let layout = HeadLayout {
            classes: config.classes,
            grid,
            prior: config.prior,
        };
        let head = Conv2d::new(&mut pb, "head", ConvSpec::pointwise(c, layout.channels()))?;
        let bias_id = head.bias.expect("pointwise conv has a bias");
        let logit = (config.prior_prob / (1.0 - config.prior_prob)).ln();
        let bias = store.get_mut(bias_id);
        for ch in OBJ_CHANNEL..CLASS_CHANNEL + config.classes {
            bias.data_mut()[ch] = logit;
        }
        Ok((
            Detector {
                variant,
                config: config.clone(),
                fusion_config: fcfg,
                layout,
                backbone_rgb,
                backbone_ir,
                fusion,
                head,
            },
            store,
        ))
    }

    pub fn features<'t>(&self, ctx: &Ctx<'t, '_>, images: &ModalityPair) -> Result<Features<'t>> {
        let s = self.config.image_size;
        for (t, c) in [(&images.rgb, 3), (&images.ir, 1)] {
            let sh = t.shape();
            if sh.c() != c || sh.h() != s || sh.w() != s {
                return Err(Error::Dimension {
                    op: "detector",
                    msg: format!("expected (N, {c}, {s}, {s}) input, got {sh}"),
                });
            }
        }
        let tape = ctx.tape();
        let run = |b: &Option<Backbone>, x: &Tensor| b.as_ref().map(|b| b.forward(ctx, tape.constant(x.clone()))).transpose();
        let backbone = ModalityPair {
            rgb: run(&self.backbone_rgb, &images.rgb)?,
            ir: run(&self.backbone_ir, &images.ir)?,
        };
        let (stages, neck) = match (&self.fusion, backbone.rgb, backbone.ir) {
            (Some(f), Some(rgb), Some(ir)) => {
                let st = f.forward_stages(ctx, &ModalityPair { rgb, ir })?;
                let neck = st.fused;
                (Some(st), neck)
            }
            (None, Some(x), None) | (None, None, Some(x)) => (None, x),
            _ => unreachable!("backbones are built to match the variant"),
        };
        Ok(Features { backbone, stages, neck })
    }

    /// Raw head output `(N, 5 + K, G, G)`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, images: &ModalityPair) -> Result<Var<'t>> {
        let f = self.features(ctx, images)?;
        self.head.forward(ctx, f.neck)
    }

    pub fn grid_shape(&self, batch: usize) -> Shape {
        Shape::new(batch, self.layout.channels(), self.layout.grid, self.layout.grid)
    }
}
