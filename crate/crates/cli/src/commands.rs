//! Subcommand bodies, independent of argument parsing.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use fredft::detection::{evaluate, generate_synthetic, synthetic_sample, train_with, Detector, EvalReport, ModelVariant, Trained, ABLATION_ROWS};
use fredft::nn::ParamStore;

use crate::config::RunConfig;
use crate::dump::{self, Stage};
use crate::error::{CliError, CliResult};
use crate::weights;

/// Window of the final moving-average training loss.
pub const LOSS_WINDOW: usize = 100;

pub fn parse_variant(name: &str) -> CliResult<ModelVariant> {
    ModelVariant::from_name(name).map_err(|e| CliError::Usage(e.to_string()))
}

/// Trains with progress on stderr every `report_every` steps (0 for none).
pub fn train_variant(cfg: &RunConfig, variant: ModelVariant, report_every: usize) -> CliResult<Trained> {
    let total = cfg.train.total_steps(cfg.data.count);
    let trained = train_with(variant, &cfg.detector, &cfg.model, &cfg.data, &cfg.train, |e| {
        if report_every > 0 && (e.step % report_every == 0 || e.step + 1 == total) {
            eprintln!(
                "[{}] step {}/{} lr {:.2e} loss {:.4} (box {:.4} cls {:.4} obj {:.4})",
                variant.name(),
                e.step + 1,
                total,
                e.lr,
                e.loss.total,
                e.loss.l_box,
                e.loss.l_cls,
                e.loss.l_obj
            );
        }
    })?;
    Ok(trained)
}

/// The training log sits next to the weights: `<out>.log`.
pub fn log_path(weights: &Path) -> PathBuf {
    weights.with_extension("log")
}

pub fn train(cfg: &RunConfig, variant: ModelVariant, out: &Path) -> CliResult<Trained> {
    let trained = train_variant(cfg, variant, 50)?;
    weights::save(out, &trained.store)?;
    let log = log_path(out);
    std::fs::write(&log, trained.log.to_text()).map_err(|e| CliError::io(&log, e))?;
    Ok(trained)
}

/// A freshly built detector with weights from `path`.
pub fn load_model(cfg: &RunConfig, variant: ModelVariant, path: &Path) -> CliResult<(Detector, ParamStore)> {
    let (detector, mut store) = Detector::new(variant, &cfg.detector, &cfg.model, cfg.train.seed)?;
    weights::load(path, &mut store)?;
    Ok((detector, store))
}

pub fn eval(cfg: &RunConfig, detector: &Detector, store: &ParamStore) -> CliResult<EvalReport> {
    let samples = generate_synthetic(&cfg.eval_data())?;
    Ok(evaluate(detector, store, &samples)?)
}

/// `key value` lines.
pub fn eval_text(variant: ModelVariant, r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "variant {}", variant.name());
    let _ = writeln!(s, "recall {:.6}", r.recall);
    let _ = writeln!(s, "mean_iou {:.6}", r.mean_iou);
    for (k, c) in [("both", r.both), ("rgb_only", r.rgb_only), ("ir_only", r.ir_only)] {
        let _ = writeln!(s, "recall_{k} {:.6} ({}/{})", c.recall(), c.matched, c.total);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: &'static str,
    pub recall: f64,
    pub final_loss: f64,
}

/// Trains every ablation row with the same seed and scores it.
pub fn ablate(cfg: &RunConfig) -> CliResult<Vec<AblationRow>> {
    let eval_set = generate_synthetic(&cfg.eval_data())?;
    let mut rows = Vec::new();
    for (name, _) in ABLATION_ROWS {
        let variant = parse_variant(name)?;
        let t = train_variant(cfg, variant, 250)?;
        let r = evaluate(&t.detector, &t.store, &eval_set)?;
        let final_loss = t.log.final_average(LOSS_WINDOW).unwrap_or(f64::NAN);
        eprintln!("[{name}] recall {:.4} loss {final_loss:.4}", r.recall);
        rows.push(AblationRow { name, recall: r.recall, final_loss });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("variant,recall,final_loss_ma{LOSS_WINDOW}\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6}", r.name, r.recall, r.final_loss);
    }
    s
}

/// Feature maps of eval sample `index`.
pub fn dump_features(
    cfg: &RunConfig,
    detector: &Detector,
    store: &ParamStore,
    index: usize,
    stage: Stage,
    dir: &Path,
) -> CliResult<Vec<PathBuf>> {
    let eval = cfg.eval_data();
    if index >= eval.count {
        return Err(CliError::Usage(format!("index {index} outside the {} eval samples", eval.count)));
    }
    let sample = synthetic_sample(&eval, index);
    dump::dump_features(detector, store, &sample, index, stage, dir)
}

/// Writes `text` to `out`, or stdout when `out` is `None`.
pub fn emit(text: &str, out: Option<&Path>) -> CliResult<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::io(p, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| CliError::io("<stdout>", e))
        }
    }
}
