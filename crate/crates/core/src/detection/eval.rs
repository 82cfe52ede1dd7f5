use serde::{Deserialize, Serialize};

use super::boxes::iou;
use super::data::{collate, SyntheticSample, Visibility};
use super::model::Detector;
use super::BBox;
use crate::autodiff::Tape;
use crate::error::Result;
use crate::nn::{Ctx, ParamStore};

pub const SCORE_THRESHOLD: f64 = 0.5;
pub const IOU_THRESHOLD: f64 = 0.5;

/// Greedy one-to-one matching. Predictions scoring at least `score_thr`
/// are visited in descending score order; each takes the unmatched truth
/// box with the highest IoU, if that IoU is at least `iou_thr`. Returns the
/// matched prediction index and IoU per truth box.
pub fn greedy_match(preds: &[BBox], truth: &[BBox], score_thr: f64, iou_thr: f64) -> Vec<Option<(usize, f64)>> {
    let mut order: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].score >= score_thr).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut matched: Vec<Option<(usize, f64)>> = vec![None; truth.len()];
    for p in order {
        let best = truth
            .iter()
            .enumerate()
            .filter(|(t, _)| matched[*t].is_none())
            .map(|(t, b)| (t, iou(&preds[p], b)))
            .filter(|&(_, v)| v >= iou_thr)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((t, v)) = best {
            matched[t] = Some((p, v));
        }
    }
    matched
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecallCount {
    pub matched: usize,
    pub total: usize,
}

impl RecallCount {
    pub fn recall(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.matched as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall: f64,
    /// Mean IoU of matched pairs; 0 when nothing matched.
    pub mean_iou: f64,
    pub overall: RecallCount,
    pub both: RecallCount,
    pub rgb_only: RecallCount,
    pub ir_only: RecallCount,
}

impl EvalReport {
    pub fn by_visibility(&self, v: Visibility) -> RecallCount {
        match v {
            Visibility::Both => self.both,
            Visibility::RgbOnly => self.rgb_only,
            Visibility::IrOnly => self.ir_only,
        }
    }

    fn by_visibility_mut(&mut self, v: Visibility) -> &mut RecallCount {
        match v {
            Visibility::Both => &mut self.both,
            Visibility::RgbOnly => &mut self.rgb_only,
            Visibility::IrOnly => &mut self.ir_only,
        }
    }
}

/// Scores per-image predictions against truth with visibility labels.
pub fn score_predictions(preds: &[Vec<BBox>], truth: &[(Vec<BBox>, Vec<Visibility>)]) -> EvalReport {
    let mut r = EvalReport::default();
    let mut iou_sum = 0.0;
    for (p, (t, vis)) in preds.iter().zip(truth) {
        for (m, v) in greedy_match(p, t, SCORE_THRESHOLD, IOU_THRESHOLD).iter().zip(vis) {
            r.overall.total += 1;
            r.by_visibility_mut(*v).total += 1;
            if let Some((_, iou)) = m {
                r.overall.matched += 1;
                r.by_visibility_mut(*v).matched += 1;
                iou_sum += iou;
            }
        }
    }
    r.recall = r.overall.recall();
    r.mean_iou = if r.overall.matched == 0 {
        0.0
    } else {
        iou_sum / r.overall.matched as f64
    };
    r
}

/// Decoded predictions in eval mode (running batch-norm statistics).
pub fn predict(detector: &Detector, store: &ParamStore, samples: &[&SyntheticSample]) -> Result<Vec<Vec<BBox>>> {
    let (images, _) = collate(samples)?;
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, store);
    let out = detector.forward(&ctx, &images)?;
    detector.layout.decode(&out.value())
}

pub fn evaluate(detector: &Detector, store: &ParamStore, samples: &[SyntheticSample]) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(16) {
        preds.extend(predict(detector, store, &chunk.iter().collect::<Vec<_>>())?);
    }
    let truth: Vec<_> = samples.iter().map(|s| (s.truth.clone(), s.visibility.clone())).collect();
    Ok(score_predictions(&preds, &truth))
}
