use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{collate, generate_synthetic, SyntheticConfig, SyntheticSample};
use super::loss::{detection_loss, LossBreakdown, VarifocalParams};
use super::model::{Detector, DetectorConfig, ModelVariant};
use crate::autodiff::Tape;
use crate::conv::NormMode;
use crate::error::{Error, Result};
use crate::fusion::FreDFTConfig;
use crate::nn::{Ctx, ParamKind, ParamStore, BN_MOMENTUM};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    /// Applied to convolution kernels only.
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Passes over the training set; each step takes `batch_size` samples.
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub varifocal: VarifocalParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-2,
            momentum: 0.937,
            weight_decay: 5e-4,
            warmup_steps: 100,
            epochs: 8,
            batch_size: 8,
            seed: 0,
            varifocal: VarifocalParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples / self.batch_size.max(1)
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        self.epochs * self.steps_per_epoch(samples)
    }

    pub fn validate(&self, samples: usize) -> Result<()> {
        if self.batch_size == 0 || self.total_steps(samples) == 0 {
            return Err(Error::InvalidArgument(format!(
                "{samples} samples, batch {} and {} epochs give no steps",
                self.batch_size, self.epochs
            )));
        }
        if !(self.lr0 > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("lr0, momentum or weight_decay out of range".into()));
        }
        Ok(())
    }
}

/// Linear warmup `lr0 (t + 1) / warmup`, then cosine decay reaching
/// `lr0 / 100` at the last step.
pub fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    let lr_min = cfg.lr0 / 100.0;
    let warm = cfg.warmup_steps.min(total);
    if step < warm {
        return cfg.lr0 * (step + 1) as f64 / warm as f64;
    }
    let span = total.saturating_sub(1 + warm);
    if span == 0 {
        return lr_min;
    }
    let t = (step - warm).min(span) as f64 / span as f64;
    lr_min + (cfg.lr0 - lr_min) * 0.5 * (1.0 + (PI * t).cos())
}

/// SGD with momentum, `v = mu v + g + wd w`, `w -= lr v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(crate::nn::ParamId, Tensor)], lr: f64, cfg: &TrainConfig) -> Result<()> {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (id, g) in grads {
            let p = store.param(*id);
            let decay = if p.kind == ParamKind::Weight { cfg.weight_decay } else { 0.0 };
            let mut d = g.clone();
            if decay > 0.0 {
                d = d.add(&p.value.scale(decay))?;
            }
            let v = match self.velocity[id.index()].take() {
                Some(v) => v.scale(cfg.momentum).add(&d)?,
                None => d,
            };
            let w = store.get(*id).sub(&v.scale(lr))?;
            store.set(*id, w)?;
            self.velocity[id.index()] = Some(v);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub const HEADER: &'static str = "step,lr,l_box,l_cls,l_obj,total";

    pub fn line(e: &LogEntry) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e}",
            e.step, e.lr, e.loss.l_box, e.loss.l_cls, e.loss.l_obj, e.loss.total
        )
    }

    /// Header plus one line per step.
    pub fn to_text(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for e in &self.entries {
            let _ = writeln!(s, "{}", Self::line(e));
        }
        s
    }

    /// Mean total loss over the `window` steps ending at `step` (inclusive).
    pub fn moving_average(&self, step: usize, window: usize) -> Option<f64> {
        let end = self.entries.iter().position(|e| e.step == step)? + 1;
        let start = end.saturating_sub(window);
        let xs = &self.entries[start..end];
        Some(xs.iter().map(|e| e.loss.total).sum::<f64>() / xs.len() as f64)
    }

    /// Moving average over the last `window` steps.
    pub fn final_average(&self, window: usize) -> Option<f64> {
        self.moving_average(self.entries.last()?.step, window)
    }
}

pub struct Trained {
    pub detector: Detector,
    pub store: ParamStore,
    pub log: TrainLog,
}

/// One SGD step on a batch; returns the loss before the update.
pub fn train_step(
    detector: &Detector,
    store: &mut ParamStore,
    sgd: &mut Sgd,
    batch: &[&SyntheticSample],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let (images, truth) = collate(batch)?;
    let tape = Tape::new();
    let (grads, updates, loss) = {
        let ctx = Ctx::new(&tape, store, NormMode::Train);
        let out = detector.forward(&ctx, &images)?;
        if !out.value().is_finite() {
            return Ok(LossBreakdown::new(f64::NAN, f64::NAN, f64::NAN));
        }
        let (total, loss) = match detection_loss(&detector.layout, out, &truth, &cfg.varifocal) {
            Err(Error::DegenerateBox { .. }) => return Ok(LossBreakdown::new(f64::NAN, f64::NAN, f64::NAN)),
            r => r?,
        };
        if !loss.is_finite() {
            return Ok(loss);
        }
        let grads = tape.backward(total)?;
        (ctx.param_grads(&grads), ctx.take_bn_updates(), loss)
    };
    if grads.iter().any(|(_, g)| !g.is_finite()) {
        return Ok(LossBreakdown::new(f64::NAN, f64::NAN, f64::NAN));
    }
    sgd.step(store, &grads, lr, cfg)?;
    store.apply_bn_updates(&updates, BN_MOMENTUM);
    Ok(loss)
}

/// Trains `variant` on `data.count` synthetic samples. `on_step` sees each
/// log entry as it is produced.
pub fn train_with(
    variant: ModelVariant,
    detector_cfg: &DetectorConfig,
    fusion_cfg: &FreDFTConfig,
    data: &SyntheticConfig,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LogEntry),
) -> Result<Trained> {
    let samples = generate_synthetic(data)?;
    cfg.validate(samples.len())?;
    let (detector, mut store) = Detector::new(variant, detector_cfg, fusion_cfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_da7a);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let per_epoch = cfg.steps_per_epoch(samples.len());
    let total = cfg.total_steps(samples.len());
    let mut sgd = Sgd::default();
    let mut log = TrainLog::default();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for b in 0..per_epoch {
            let batch: Vec<&SyntheticSample> = order[b * cfg.batch_size..(b + 1) * cfg.batch_size]
                .iter()
                .map(|&i| &samples[i])
                .collect();
            let lr = lr_at(cfg, step, total);
            let loss = train_step(&detector, &mut store, &mut sgd, &batch, lr, cfg)?;
            if !loss.is_finite() {
                let last = log
                    .entries
                    .last()
                    .map_or_else(|| "none".to_string(), |e| format!("{:?}", e.loss));
                return Err(Error::Diverged { step, last });
            }
            let entry = LogEntry { step, lr, loss };
            on_step(&entry);
            log.entries.push(entry);
            step += 1;
        }
    }
    Ok(Trained { detector, store, log })
}

pub fn train(
    variant: ModelVariant,
    detector_cfg: &DetectorConfig,
    fusion_cfg: &FreDFTConfig,
    data: &SyntheticConfig,
    cfg: &TrainConfig,
) -> Result<Trained> {
    train_with(variant, detector_cfg, fusion_cfg, data, cfg, |_| {})
}
