use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use super::eval::evaluate;
use super::trainer::{load_params, EpochLog, Trainer, LOG_HEADER};
use crate::data::Dataset;
use crate::detector::Checkpoint;
use crate::error::Result;
use crate::metrics::MetricsReport;

pub const LOG_FILE: &str = "train_log.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Clone, Debug)]
pub struct FitSummary {
    pub logs: Vec<EpochLog>,
    /// Validation report after the final epoch, when a validation set was given.
    pub final_metrics: Option<MetricsReport>,
    pub best_map50: Option<f64>,
}

/// Train from `trainer.epoch` up to the configured epoch count.
///
/// With `out` set, writes the epoch log (appending when resuming), `last.ckpt`
/// after every epoch (once up front when no epoch is left to run) and
/// `best.ckpt` whenever validation mAP50 improves. A resumed run scores an
/// existing `best.ckpt` first so it is only replaced by a better epoch.
pub fn fit(
    trainer: &mut Trainer,
    train: &Dataset,
    val: Option<&Dataset>,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog, Option<&MetricsReport>),
) -> Result<FitSummary> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let log = dir.join(LOG_FILE);
        if trainer.epoch == 0 || !log.exists() {
            fs::write(&log, format!("{LOG_HEADER}\n"))?;
        }
    }
    let mut summary = FitSummary {
        logs: Vec::new(),
        final_metrics: None,
        best_map50: None,
    };
    if let (Some(dir), Some(v)) = (out, val) {
        let best = dir.join(BEST_CHECKPOINT);
        if trainer.epoch > 0 && best.exists() {
            let ck = Checkpoint::load(&best, &trainer.model.config)?;
            let mut model = trainer.model.clone();
            load_params(&mut model, &ck)?;
            summary.best_map50 = Some(evaluate(&model, v, trainer.config.exec)?.map50);
        }
    }
    if let Some(dir) = out {
        if trainer.epoch >= trainer.config.epochs {
            trainer.checkpoint().save(&dir.join(LAST_CHECKPOINT))?;
        }
    }
    while trainer.epoch < trainer.config.epochs {
        let row = trainer.run_epoch(train)?;
        let metrics = match val {
            Some(v) => Some(evaluate(&trainer.model, v, trainer.config.exec)?),
            None => None,
        };
        if let Some(dir) = out {
            let mut f = OpenOptions::new().append(true).open(dir.join(LOG_FILE))?;
            writeln!(f, "{}", row.csv_row())?;
            let ck = trainer.checkpoint();
            ck.save(&dir.join(LAST_CHECKPOINT))?;
            if let Some(m) = &metrics {
                if summary.best_map50.is_none_or(|b| m.map50 > b) {
                    ck.save(&dir.join(BEST_CHECKPOINT))?;
                }
            }
        }
        if let Some(m) = &metrics {
            if summary.best_map50.is_none_or(|b| m.map50 > b) {
                summary.best_map50 = Some(m.map50);
            }
        }
        on_epoch(&row, metrics.as_ref());
        summary.logs.push(row);
        summary.final_metrics = metrics;
    }
    Ok(summary)
}
