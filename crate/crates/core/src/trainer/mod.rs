//! Orchestration of both training stages, evaluation and inference.

pub mod batch;
pub mod config;
pub mod eval;
pub mod joint;
pub mod log;
pub mod pretrain;
pub mod smoke;

pub use batch::{pair_batch, Batcher, JointBatch};
pub use config::{Ablation, DataSource, PlateauRule, Precision, RunConfig, Stage};
pub use eval::{evaluate_dataset, infer_directory, EvalEmbedders, EvalReport, ImageRow, InferOptions};
pub use joint::{continue_joint, resolve_pretrain, run_joint, JointOutcome, JointTrainer, TrainedGenerator};
pub use log::{read_log, LogRecord, TrainingLog};
pub use pretrain::{run_pretrain, PretrainOutcome};
pub use smoke::{run_smoke_experiment, run_smoke_with, SmokeConfig, SmokeCriteria, SmokeReport};

/// Set to `1` or `true` to pin the CPU backend to a single worker thread.
pub const DETERMINISTIC_ENV: &str = "FACEFILL_DETERMINISTIC";

/// Honours [`DETERMINISTIC_ENV`]. Must run before the first tensor op,
/// since the worker pool is sized once.
pub fn apply_deterministic_env() -> bool {
    let on = std::env::var(DETERMINISTIC_ENV)
        .map(|v| matches!(v.trim().to_ascii_lowercase().as_str(), "1" | "true" | "yes"))
        .unwrap_or(false);
    if on {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    on
}
