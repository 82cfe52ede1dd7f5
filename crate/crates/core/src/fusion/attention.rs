use serde::{Deserialize, Serialize};

use super::{check_pair, FreDFTConfig, VarPair, MFDA_IMAG_TOL};
use crate::autodiff::{attention_weights, ComplexVar, Var};
use crate::conv::ConvSpec;
use crate::error::Result;
use crate::nn::{Conv2d, Ctx, LayerNorm, ParamBuilder};
use crate::tensor::{ModalityPair, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Spectrum products (MFDA).
    Frequency,
    /// Softmax dot-product attention over positions (MSDA).
    Spatial,
}

/// `Q, K, V = dwconv3x3(conv1x1(LN(x)))`, split into thirds.
#[derive(Clone, Debug)]
pub struct QkvProjection {
    norm: LayerNorm,
    qkv: Conv2d,
    dw: Conv2d,
    channels: usize,
}

impl QkvProjection {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, c: usize) -> Result<Self> {
        let mut pb = pb.scope(name);
        Ok(QkvProjection {
            norm: LayerNorm::new(&mut pb, "norm", c),
            qkv: Conv2d::new(&mut pb, "qkv", ConvSpec::pointwise(c, 3 * c))?,
            dw: Conv2d::new(&mut pb, "dw", ConvSpec::depthwise(3 * c, 3))?,
            channels: c,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<[Var<'t>; 3]> {
        let y = self.dw.forward(ctx, self.qkv.forward(ctx, self.norm.forward(ctx, x)?)?)?;
        let c = self.channels;
        let parts = y.split_channels(&[c, c, c])?;
        Ok([parts[0], parts[1], parts[2]])
    }
}

/// `F(q) * F(k)` (or `F(q) * conj(F(k))`).
pub fn spectrum_product<'t>(q: Var<'t>, k: Var<'t>, conjugate_key: bool) -> Result<ComplexVar<'t>> {
    let fq = ComplexVar::real(q).fft2d()?;
    let fk = ComplexVar::real(k).fft2d()?;
    fq.mul(&fk, conjugate_key)
}

#[derive(Clone, Debug)]
struct MfdaSide {
    qkv: QkvProjection,
    norm: LayerNorm,
    proj: Conv2d,
}

/// Multimodal frequency-domain attention:
/// `out_m = x_m + conv1x1(LN(ifft(F(Q_m) * F(K_m))) * V_other)`.
#[derive(Clone, Debug)]
pub struct Mfda {
    pub channels: usize,
    pub conjugate_key: bool,
    pub cross_qk: bool,
    rgb: MfdaSide,
    ir: MfdaSide,
}

impl Mfda {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cfg: &FreDFTConfig) -> Result<Self> {
        let c = cfg.channels;
        let mut pb = pb.scope(name);
        let mut side = |name: &str| -> Result<MfdaSide> {
            let mut pb = pb.scope(name);
            Ok(MfdaSide {
                qkv: QkvProjection::new(&mut pb, "qkv", c)?,
                norm: LayerNorm::new(&mut pb, "norm", c),
                proj: Conv2d::new(&mut pb, "proj", ConvSpec::pointwise(c, c))?,
            })
        };
        Ok(Mfda {
            channels: c,
            conjugate_key: cfg.conjugate_key,
            cross_qk: cfg.cross_qk,
            rgb: side("rgb")?,
            ir: side("ir")?,
        })
    }

    /// The real-domain similarity map `ifft(F(q) * F(k))`; fails if the
    /// imaginary residue exceeds [`MFDA_IMAG_TOL`].
    pub fn similarity<'t>(&self, q: Var<'t>, k: Var<'t>) -> Result<Var<'t>> {
        spectrum_product(q, k, self.conjugate_key)?
            .ifft2d()?
            .take_real(Some(MFDA_IMAG_TOL))
    }

    pub fn qkv<'t>(&self, ctx: &Ctx<'t, '_>, pair: &VarPair<'t>) -> Result<ModalityPair<[Var<'t>; 3]>> {
        Ok(ModalityPair {
            rgb: self.rgb.qkv.forward(ctx, pair.rgb)?,
            ir: self.ir.qkv.forward(ctx, pair.ir)?,
        })
    }

    /// Largest `|im|` of the inverse-transformed products, per modality.
    pub fn imaginary_residue<'t>(&self, ctx: &Ctx<'t, '_>, pair: &VarPair<'t>) -> Result<f64> {
        let qkv = self.qkv(ctx, pair)?;
        let (r, i) = (&qkv.rgb, &qkv.ir);
        let (kr, ki) = if self.cross_qk { (i[1], r[1]) } else { (r[1], i[1]) };
        let a = spectrum_product(r[0], kr, self.conjugate_key)?.ifft2d()?.max_abs_imag();
        let b = spectrum_product(i[0], ki, self.conjugate_key)?.ifft2d()?.max_abs_imag();
        Ok(a.max(b))
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, pair: &VarPair<'t>) -> Result<VarPair<'t>> {
        check_pair("mfda", pair, self.channels)?;
        let qkv = self.qkv(ctx, pair)?;
        let [qr, kr, vr] = qkv.rgb;
        let [qi, ki, vi] = qkv.ir;
        let (kr_src, ki_src) = if self.cross_qk { (ki, kr) } else { (kr, ki) };
        let branch = |side: &MfdaSide, x: Var<'t>, q: Var<'t>, k: Var<'t>, v_other: Var<'t>| -> Result<Var<'t>> {
            let s = side.norm.forward(ctx, self.similarity(q, k)?)?;
            x.add(side.proj.forward(ctx, s.mul(v_other)?)?)
        };
        Ok(ModalityPair {
            rgb: branch(&self.rgb, pair.rgb, qr, kr_src, vi)?,
            ir: branch(&self.ir, pair.ir, qi, ki_src, vr)?,
        })
    }
}

#[derive(Clone, Debug)]
struct MsdaSide {
    qkv: QkvProjection,
    proj: Conv2d,
}

/// Multimodal spatial-domain attention, the dot-product baseline:
/// `out_m = x_m + conv1x1(softmax(Q_m^T K_m / sqrt(C)) V_other)`.
#[derive(Clone, Debug)]
pub struct Msda {
    pub channels: usize,
    rgb: MsdaSide,
    ir: MsdaSide,
}

impl Msda {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cfg: &FreDFTConfig) -> Result<Self> {
        let c = cfg.channels;
        let mut pb = pb.scope(name);
        let mut side = |name: &str| -> Result<MsdaSide> {
            let mut pb = pb.scope(name);
            Ok(MsdaSide {
                qkv: QkvProjection::new(&mut pb, "qkv", c)?,
                proj: Conv2d::new(&mut pb, "proj", ConvSpec::pointwise(c, c))?,
            })
        };
        Ok(Msda {
            channels: c,
            rgb: side("rgb")?,
            ir: side("ir")?,
        })
    }

    fn scale(&self) -> f64 {
        1.0 / (self.channels as f64).sqrt()
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, pair: &VarPair<'t>) -> Result<VarPair<'t>> {
        check_pair("msda", pair, self.channels)?;
        let [qr, kr, vr] = self.rgb.qkv.forward(ctx, pair.rgb)?;
        let [qi, ki, vi] = self.ir.qkv.forward(ctx, pair.ir)?;
        let scale = self.scale();
        let rgb = pair.rgb.add(self.rgb.proj.forward(ctx, qr.attention(kr, vi, scale)?)?)?;
        let ir = pair.ir.add(self.ir.proj.forward(ctx, qi.attention(ki, vr, scale)?)?)?;
        Ok(ModalityPair { rgb, ir })
    }

    /// The `(N, 1, HW, HW)` attention matrix of the RGB branch.
    pub fn rgb_attention_matrix<'t>(&self, ctx: &Ctx<'t, '_>, pair: &VarPair<'t>) -> Result<Tensor> {
        let [q, k, _] = self.rgb.qkv.forward(ctx, pair.rgb)?;
        attention_weights(&q.value(), &k.value(), self.scale())
    }
}

/// Either attention, selected by [`AttentionKind`].
#[derive(Clone, Debug)]
pub enum Attention {
    Frequency(Mfda),
    Spatial(Msda),
}

impl Attention {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, cfg: &FreDFTConfig, kind: AttentionKind) -> Result<Self> {
        Ok(match kind {
            AttentionKind::Frequency => Attention::Frequency(Mfda::new(pb, name, cfg)?),
            AttentionKind::Spatial => Attention::Spatial(Msda::new(pb, name, cfg)?),
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, pair: &VarPair<'t>) -> Result<VarPair<'t>> {
        match self {
            Attention::Frequency(m) => m.forward(ctx, pair),
            Attention::Spatial(m) => m.forward(ctx, pair),
        }
    }
}
