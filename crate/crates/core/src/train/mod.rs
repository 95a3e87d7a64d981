//! Training, evaluation and the module ablation sweep.

mod ablation;
mod eval;
mod fit;
mod trainer;

pub use ablation::{
    median, run_ablation, setting_config, AblationPlan, AblationReport, AblationRow, ABLATION_CSV_HEADER,
    ABLATION_SEEDS,
};
pub use eval::{detect_all, eval_csv, evaluate, EVAL_CONF, EVAL_CSV_HEADER, EVAL_NMS_IOU};
pub use fit::{fit, FitSummary, BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_FILE};
pub use trainer::{load_params, EpochLog, TrainConfig, Trainer, LOG_HEADER};
