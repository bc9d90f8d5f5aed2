use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{Ablation, DataSource, RunConfig, Stage};
use super::eval::{evaluate_dataset, EvalEmbedders, EvalReport};
use super::joint::{continue_joint, JointTrainer};
use super::log::LogRecord;
use super::pretrain::run_pretrain;
use crate::contrastive::EncoderConfig;
use crate::daf::DafConfig;
use crate::data::Dataset;
use crate::error::Result;
use crate::optim::AdamConfig;
use crate::util::mix;

/// Scaled end-to-end experiment: synthetic faces, stage 1, stage 2, held-out
/// evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmokeConfig {
    pub seed: u64,
    pub train_count: usize,
    pub holdout_count: usize,
    pub size: usize,
    pub pretrain_steps: u64,
    pub joint_steps: u64,
    /// Template for both stages; its `steps`, `stage`, `data` and
    /// `pretrain_checkpoint` are overwritten.
    pub run: RunConfig,
}

impl Default for SmokeConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

impl SmokeConfig {
    /// The desk-scale settings used by the acceptance run.
    pub fn desk(seed: u64) -> Self {
        let run = RunConfig {
            seed,
            encoder: EncoderConfig {
                in_channels: 3,
                base_width: 8,
                num_stages: 6,
                embed_dim: 128,
                max_width: 32,
            },
            daf: DafConfig {
                reduction: 4,
                attn_hidden: 8,
                ..Default::default()
            },
            batch_size: 4,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            ..RunConfig::default()
        };
        Self {
            seed,
            train_count: 64,
            holdout_count: 16,
            size: 128,
            pretrain_steps: 100,
            joint_steps: 200,
            run,
        }
    }

    pub fn stage_config(&self, stage: Stage) -> RunConfig {
        RunConfig {
            stage,
            seed: self.seed,
            steps: match stage {
                Stage::Pretrain => self.pretrain_steps,
                Stage::Joint => self.joint_steps,
            },
            data: DataSource::Synthetic {
                count: self.train_count,
                height: self.size,
                width: self.size,
                seed: self.seed,
            },
            pretrain_checkpoint: None,
            ..self.run.clone()
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.run.ablation = ablation;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmokeCriteria {
    /// Final total loss is at most 70% of the first.
    pub loss_drop: bool,
    /// Held-out PSNR beats the masked input by at least 3 dB.
    pub psnr_gain: bool,
    /// Held-out masked UV error fell during training.
    pub uv_improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmokeReport {
    pub config: SmokeConfig,
    pub pretrain_log: Vec<LogRecord>,
    pub joint_log: Vec<LogRecord>,
    pub first_total: f64,
    pub last_total: f64,
    pub loss_ratio: f64,
    pub initial_eval: EvalReport,
    pub final_eval: EvalReport,
    pub psnr_gain_db: f64,
    pub criteria: SmokeCriteria,
    pub elapsed_s: f64,
}

/// Runs the desk-scale experiment for `seed`.
pub fn run_smoke_experiment(seed: u64) -> Result<SmokeReport> {
    run_smoke_with(&SmokeConfig::desk(seed))
}

pub fn run_smoke_with(cfg: &SmokeConfig) -> Result<SmokeReport> {
    let start = Instant::now();
    let all = Dataset::synthetic(cfg.train_count + cfg.holdout_count, cfg.size, cfg.size, cfg.seed)?;
    let (train, holdout) = all.split_tail(cfg.holdout_count)?;

    let joint_cfg = cfg.stage_config(Stage::Joint);
    let mut pretrain_log = Vec::new();
    let pretrain_archive = if joint_cfg.ablation.use_contrastive_init {
        let out = run_pretrain(&cfg.stage_config(Stage::Pretrain), &train, None)?;
        pretrain_log = out.log.records().to_vec();
        Some(out.pretrainer.to_archive()?)
    } else {
        None
    };

    let trainer = JointTrainer::new(&joint_cfg, pretrain_archive.as_ref())?;
    let dtype = trainer.model.params.dtype();
    let embedders = EvalEmbedders::new(trainer.extractor_config(), dtype)?;
    let eval_seed = mix(cfg.seed, 0xe7a1);
    let initial_eval = evaluate_dataset(
        &trainer.model,
        &holdout,
        eval_seed,
        &embedders,
        joint_cfg.batch_size,
    )?;
    let out = continue_joint(trainer, &joint_cfg, &train)?;
    let final_eval = evaluate_dataset(
        &out.trainer.model,
        &holdout,
        eval_seed,
        &embedders,
        joint_cfg.batch_size,
    )?;

    let joint_log = out.log.records().to_vec();
    let first_total = joint_log.first().map_or(f64::NAN, |r| r.total);
    let last_total = joint_log.last().map_or(f64::NAN, |r| r.total);
    let loss_ratio = last_total / first_total;
    let psnr_gain_db = final_eval.psnr_mean - final_eval.psnr_input_mean;
    let uv_improved = match (initial_eval.uv_mse, final_eval.uv_mse) {
        (Some(a), Some(b)) => b < a,
        _ => false,
    };
    Ok(SmokeReport {
        config: cfg.clone(),
        pretrain_log,
        joint_log,
        first_total,
        last_total,
        loss_ratio,
        criteria: SmokeCriteria {
            loss_drop: loss_ratio <= 0.7,
            psnr_gain: psnr_gain_db >= 3.0,
            uv_improved,
        },
        initial_eval,
        final_eval,
        psnr_gain_db,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}
