//! Channel-averaged feature maps as binary PGM images.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fredft::autodiff::{Tape, Var};
use fredft::detection::{Detector, SyntheticSample};
use fredft::nn::{Ctx, ParamStore};
use fredft::Tensor;

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Backbone output, the input of the fusion block.
    Backbone,
    Lfem,
    Cgmm,
    /// Output of the attention stage (MFDA, or MSDA in that ablation row).
    Mfda,
    /// The fused map fed to the head.
    Fused,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Backbone, Stage::Lfem, Stage::Cgmm, Stage::Mfda, Stage::Fused];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Backbone => "backbone",
            Stage::Lfem => "lfem",
            Stage::Cgmm => "cgmm",
            Stage::Mfda => "mfda",
            Stage::Fused => "fused",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| {
            CliError::Usage(format!(
                "unknown stage {s:?}; expected one of {}",
                Stage::ALL.map(Stage::name).join(", ")
            ))
        })
    }
}

/// Mean over channels of image `n` as a row-major `H x W` map.
pub fn channel_mean(t: &Tensor, n: usize) -> (usize, usize, Vec<f64>) {
    let [_, c, h, w] = t.shape().dims();
    let mut out = vec![0.0; h * w];
    for ch in 0..c {
        let base = (n * c + ch) * h * w;
        for (o, v) in out.iter_mut().zip(&t.data()[base..base + h * w]) {
            *o += v / c as f64;
        }
    }
    (h, w, out)
}

/// Min-max scaling to `0..=255`; a constant map becomes mid-gray 128.
pub fn normalize(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) || !(hi - lo).is_finite() {
        return vec![128; values.len()];
    }
    values.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// `P5\n<W> <H>\n255\n` followed by `H * W` bytes.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count must match the header");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn map_to_pgm(t: &Tensor, n: usize) -> Vec<u8> {
    let (h, w, values) = channel_mean(t, n);
    encode_pgm(w, h, &normalize(&values))
}

/// The maps of `stage` for one sample, labelled by modality.
pub fn stage_maps(detector: &Detector, store: &ParamStore, sample: &SyntheticSample, stage: Stage) -> CliResult<Vec<(&'static str, Tensor)>> {
    let (images, _) = fredft::detection::collate(&[sample])?;
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, store);
    let f = detector.features(&ctx, &images)?;
    let value = |v: Var<'_>| (*v.value()).clone();
    let pair = |p: Option<fredft::fusion::VarPair<'_>>| -> CliResult<Vec<(&'static str, Tensor)>> {
        let p = p.ok_or_else(|| CliError::Usage(format!("stage {stage} is not part of model variant {}", detector.variant.name())))?;
        Ok(vec![("rgb", value(p.rgb)), ("ir", value(p.ir))])
    };
    match stage {
        Stage::Backbone => Ok([("rgb", f.backbone.rgb), ("ir", f.backbone.ir)]
            .into_iter()
            .filter_map(|(m, v)| v.map(|v| (m, value(v))))
            .collect()),
        Stage::Fused => Ok(vec![("joint", value(f.neck))]),
        Stage::Lfem => pair(f.stages.and_then(|s| s.lfem)),
        Stage::Cgmm => pair(f.stages.and_then(|s| s.cgmm)),
        Stage::Mfda => pair(f.stages.and_then(|s| s.attention)),
    }
}

/// Writes `<stage>_<modality>_<index>.pgm` files into `dir`.
pub fn dump_features(
    detector: &Detector,
    store: &ParamStore,
    sample: &SyntheticSample,
    index: usize,
    stage: Stage,
    dir: &Path,
) -> CliResult<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut paths = Vec::new();
    for (modality, t) in stage_maps(detector, store, sample, stage)? {
        let path = dir.join(format!("{stage}_{modality}_{index}.pgm"));
        std::fs::write(&path, map_to_pgm(&t, 0)).map_err(|e| CliError::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
