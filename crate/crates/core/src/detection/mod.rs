//! Toy detection pipeline that trains and scores the fusion block.
//!
//! Two small backbones reduce 64x64 RGB and IR images to an 8x8 grid, a
//! FreDFT block fuses them and a `1x1` head predicts one box per cell. The
//! loss is `l_box + l_cls + l_obj` with CIoU for boxes and varifocal
//! re-weighting for objectness and classes.

mod boxes;
mod data;
mod eval;
mod head;
mod loss;
mod model;
mod train;

pub use boxes::{ciou_loss, ciou_loss_var, iou, BBox, BoxVars};
pub use data::{collate, generate_synthetic, synthetic_sample, SyntheticConfig, SyntheticSample, Visibility};
pub use eval::{evaluate, greedy_match, predict, score_predictions, EvalReport, RecallCount, IOU_THRESHOLD, SCORE_THRESHOLD};
pub use head::{HeadLayout, CLASS_CHANNEL, OBJ_CHANNEL};
pub use loss::{assign, decode_at, detection_loss, detection_loss_with, DetachedTerms, varifocal_loss, varifocal_loss_var, Assignment, LossBreakdown, VarifocalParams};
pub use model::{Backbone, Detector, DetectorConfig, Features, ModelVariant, ABLATION_ROWS};
pub use train::{lr_at, train, train_step, train_with, LogEntry, Sgd, TrainConfig, TrainLog, Trained};
