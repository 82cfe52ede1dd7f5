//! The JSON run configuration.
//!
//! Every section and every field is optional; missing ones take the
//! defaults below. Unknown keys are rejected at any depth.
//!
//! | key | default |
//! |---|---|
//! | `model.channels` | 16 |
//! | `model.height`, `model.width` | 8 (overridden by the detector grid) |
//! | `model.expanded_channels` | `null`: smallest multiple of 3 >= channels |
//! | `model.conjugate_key`, `model.cross_qk` | false |
//! | `model.dilation` | 2 |
//! | `model.deformable` | true |
//! | `detector.classes` | 2 |
//! | `detector.image_size` | 64 |
//! | `detector.stage_widths` | [8, 16] |
//! | `detector.prior` | 0.25 |
//! | `detector.prior_prob` | 0.01 |
//! | `train.lr0` | 0.01 |
//! | `train.momentum` | 0.937 |
//! | `train.weight_decay` | 5e-4 |
//! | `train.warmup_steps` | 100 |
//! | `train.epochs` | 8 |
//! | `train.batch_size` | 8 |
//! | `train.seed` | 0 |
//! | `train.varifocal` | `{alpha: 0.75, gamma: 2, eps: 1e-7}` |
//! | `data.count` | 2000 |
//! | `data.seed` | 0 |
//! | `data.mix` | [0.4, 0.3, 0.3] (both, rgb_only, ir_only) |
//! | `data.size` | 64 |
//! | `data.noise` | 0.05 |
//! | `data.min_objects`, `data.max_objects` | 1, 3 |
//! | `data.long_side`, `data.short_side` | [18, 26], [10, 14] |
//! | `data.grid` | 8 |
//! | `eval.count` | 200 |
//! | `eval.seed` | 1000 |
//! | `bench.sizes` | [16, 32, 64, 128] |
//! | `bench.channels` | 32 |
//! | `bench.repeats` | 5 |

use std::path::Path;

use serde::{Deserialize, Serialize};

use fredft::detection::{DetectorConfig, SyntheticConfig, TrainConfig};
use fredft::fusion::FreDFTConfig;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: FreDFTConfig,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    /// Training set.
    pub data: SyntheticConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

/// Held-out set: the training generator settings with its own size and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub count: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { count: 200, seed: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Square map sizes `H = W`.
    pub sizes: Vec<usize>,
    pub channels: usize,
    /// Timed runs per (size, kernel); the median is reported.
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![16, 32, 64, 128],
            channels: 32,
            repeats: 5,
        }
    }
}

pub const MIN_REPEATS: usize = 5;

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// `path` if given, the defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        let usage = |e: fredft::Error| CliError::Usage(format!("config: {e}"));
        self.model.validate().map_err(usage)?;
        self.data.validate().map_err(usage)?;
        self.eval_data().validate().map_err(usage)?;
        self.train.validate(self.data.count).map_err(usage)?;
        if self.data.size != self.detector.image_size {
            return Err(CliError::Usage(format!(
                "config: data.size {} differs from detector.image_size {}",
                self.data.size, self.detector.image_size
            )));
        }
        if self.bench.repeats < MIN_REPEATS || self.bench.channels == 0 || self.bench.sizes.is_empty() || self.bench.sizes.contains(&0) {
            return Err(CliError::Usage(format!(
                "config: bench needs >= {MIN_REPEATS} repeats, positive channels and a non-empty list of positive sizes"
            )));
        }
        Ok(())
    }

    pub fn eval_data(&self) -> SyntheticConfig {
        SyntheticConfig {
            count: self.eval.count,
            seed: self.eval.seed,
            ..self.data.clone()
        }
    }
}
