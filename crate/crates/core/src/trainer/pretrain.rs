use std::path::Path;
use std::time::Instant;

use super::batch::{pair_batch, Batcher};
use super::config::{RunConfig, Stage};
use super::log::{LogRecord, TrainingLog};
use crate::archive::Archive;
use crate::contrastive::Pretrainer;
use crate::data::Dataset;
use crate::error::Result;

pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ffar";
pub const PRETRAIN_LOG: &str = "pretrain.jsonl";

pub struct PretrainOutcome {
    pub pretrainer: Pretrainer,
    pub log: TrainingLog,
    pub stopped_early: bool,
}

pub(crate) fn open_log(config: &RunConfig, name: &str) -> Result<TrainingLog> {
    match &config.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            TrainingLog::open(&dir.join(name))
        }
        None => Ok(TrainingLog::in_memory()),
    }
}

/// Stage 1 on `dataset` until `config.steps` (or the plateau rule).
///
/// `resume` continues from a checkpoint written by an earlier call.
pub fn run_pretrain(
    config: &RunConfig,
    dataset: &Dataset,
    resume: Option<&Archive>,
) -> Result<PretrainOutcome> {
    config.validate()?;
    let dtype = config.dtype();
    let mut pretrainer = match resume {
        Some(a) => Pretrainer::from_archive(a, dtype)?,
        None => Pretrainer::new(config.pretrain_config(), config.seed, dtype)?,
    };
    let batcher = Batcher::new(config.batch_size, config.seed)?;
    let mut log = open_log(config, PRETRAIN_LOG)?;
    let start = Instant::now();
    let mut stopped_early = false;
    let mut totals = log.totals(Stage::Pretrain);
    while pretrainer.step() < config.steps {
        let step = pretrainer.step();
        let samples = batcher.samples(dataset, step)?;
        let (x_q, x_k) = pair_batch(&samples, dtype)?;
        let loss = pretrainer.pretrain_step(&x_q, &x_k)?;
        log.push(LogRecord::pretrain(
            pretrainer.step(),
            loss,
            pretrainer.config.sgd.lr,
            start.elapsed().as_secs_f64(),
        ))?;
        totals.push(loss);
        if let (Some(dir), Some(every)) = (&config.out_dir, config.checkpoint_every) {
            if every > 0 && pretrainer.step() % every == 0 {
                pretrainer
                    .to_archive()?
                    .save(&dir.join(format!("pretrain_step{:06}.ffar", pretrainer.step())))?;
            }
        }
        if config.plateau.is_some_and(|p| p.reached(&totals)) {
            stopped_early = true;
            break;
        }
    }
    if let Some(dir) = &config.out_dir {
        pretrainer.to_archive()?.save(&dir.join(PRETRAIN_CHECKPOINT))?;
    }
    Ok(PretrainOutcome {
        pretrainer,
        log,
        stopped_early,
    })
}

pub fn load_pretrain_checkpoint(path: &Path) -> Result<Archive> {
    Archive::load(path)
}
