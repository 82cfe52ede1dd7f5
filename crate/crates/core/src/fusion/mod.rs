//! The RGB/IR fusion block and its parts.
//!
//! Data flows `LFEM (per modality) -> CGMM -> FDFAM`, where FDFAM is
//! frequency-domain attention (MFDA) followed by a mixed-scale frequency
//! feed-forward layer (FDFFL) per modality and a 1x1 fusion convolution.
//! Spatial attention (MSDA) and a plain MLP feed-forward are available as
//! drop-in replacements for ablations.

mod attention;
mod block;
mod cgmm;
mod ffl;
mod lfem;

pub use attention::{spectrum_product, Attention, AttentionKind, Mfda, Msda, QkvProjection};
pub use block::{Fdfam, FreDft, FusionLayout, Stages};
pub use cgmm::Cgmm;
pub use ffl::{fdffl_routing, Fdffl, FeedForward, FeedForwardKind, MlpFfl, FDFFL_KERNELS};
pub use lfem::Lfem;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::ModalityPair;

/// Pair of tape values, one per modality.
pub type VarPair<'t> = ModalityPair<Var<'t>>;

/// Largest `|im|` tolerated when the MFDA product re-enters the real domain.
pub const MFDA_IMAG_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreDFTConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// FDFFL branch width; defaults to the smallest multiple of 3 that is
    /// at least `channels`.
    pub expanded_channels: Option<usize>,
    /// Multiply by `conj(F(K))`, turning the spectrum product into a
    /// correlation.
    pub conjugate_key: bool,
    /// Take K from the other modality instead of the same one.
    pub cross_qk: bool,
    /// Dilation of the dilated LFEM branch.
    pub dilation: usize,
    /// Use a deformable convolution in LFEM; a standard 3x3 otherwise.
    pub deformable: bool,
}

impl Default for FreDFTConfig {
    fn default() -> Self {
        FreDFTConfig {
            channels: 16,
            height: 8,
            width: 8,
            expanded_channels: None,
            conjugate_key: false,
            cross_qk: false,
            dilation: 2,
            deformable: true,
        }
    }
}

impl FreDFTConfig {
    pub fn with_channels(channels: usize) -> Self {
        FreDFTConfig {
            channels,
            ..Default::default()
        }
    }

    pub fn expanded(&self) -> usize {
        self.expanded_channels.unwrap_or(3 * self.channels.div_ceil(3))
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 || self.dilation == 0 {
            return Err(Error::InvalidArgument("channels, spatial size and dilation must be positive".into()));
        }
        let ce = self.expanded();
        if ce % 3 != 0 || ce < self.channels {
            return Err(Error::InvalidArgument(format!(
                "expanded_channels {ce} must be a multiple of 3 and >= channels {}",
                self.channels
            )));
        }
        Ok(())
    }
}

fn check_pair(op: &'static str, pair: &VarPair<'_>, channels: usize) -> Result<()> {
    let (a, b) = (pair.rgb.shape(), pair.ir.shape());
    if a != b {
        return Err(Error::ShapeMismatch { op, lhs: a, rhs: b });
    }
    if a.c() != channels {
        return Err(Error::Dimension {
            op,
            msg: format!("expected {channels} channels, got {}", a.c()),
        });
    }
    Ok(())
}
