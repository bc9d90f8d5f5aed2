use std::time::Instant;

use candle_core::{DType, Tensor};

use super::batch::{Batcher, JointBatch};
use super::config::{Precision, RunConfig, Stage};
use super::log::{LogRecord, TrainingLog};
use super::pretrain::open_log;
use crate::archive::Archive;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::generator::{encoder_from_pretrain, Generator, GeneratorConfig, MultiScaleOutput};
use crate::losses::{
    total_loss, ExtractorConfig, FeatureExtractor, IdentityEmbedder, LossBreakdown, LossWeights, ScaleTargets,
};
use crate::nn::ParamStore;
use crate::optim::{Adam, AdamConfig};

pub const JOINT_CHECKPOINT: &str = "joint.ffar";
pub const JOINT_LOG: &str = "joint.jsonl";

/// Generator parameters plus the configuration needed to rebuild it.
#[derive(Debug, Clone)]
pub struct TrainedGenerator {
    pub config: GeneratorConfig,
    pub params: ParamStore,
    pub generator: Generator,
}

impl TrainedGenerator {
    pub fn new(config: GeneratorConfig, seed: u64, dtype: DType) -> Result<Self> {
        let params = ParamStore::new(seed, dtype);
        let generator = Generator::new(&params.root(), config.clone())?;
        Ok(Self {
            config,
            params,
            generator,
        })
    }

    pub fn generate(&self, x_q: &Tensor, mask: &Tensor) -> Result<MultiScaleOutput> {
        self.generator.generate(x_q, mask)
    }

    pub fn save_into(&self, archive: &mut Archive) -> Result<()> {
        self.params.save_into(archive, "gen.")?;
        archive.put_json("joint.generator", &self.config)?;
        archive.put_json("joint.param_seed", &self.params.seed())?;
        archive.put_json(
            "joint.precision",
            &if self.params.dtype() == DType::F64 {
                Precision::F64
            } else {
                Precision::F32
            },
        )
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        if !archive.contains("joint.generator") {
            return Err(Error::Checkpoint("archive holds no stage-2 generator".into()));
        }
        let config: GeneratorConfig = archive.get_json("joint.generator")?;
        let seed: u64 = archive.get_json("joint.param_seed")?;
        let precision: Precision = archive.get_json("joint.precision")?;
        let g = Self::new(config, seed, precision.dtype())?;
        g.params.load_from(archive, "gen.")?;
        Ok(g)
    }
}

/// Full stage-2 training state.
pub struct JointTrainer {
    pub model: TrainedGenerator,
    optimizer: Adam,
    weights: LossWeights,
    extractor: ExtractorConfig,
    phi: FeatureExtractor,
    psi: IdentityEmbedder,
    step: u64,
}

impl JointTrainer {
    /// Fresh state. With `use_contrastive_init` the trunk is copied from the
    /// stage-1 archive, which must then be supplied.
    pub fn new(config: &RunConfig, pretrain: Option<&Archive>) -> Result<Self> {
        config.validate()?;
        let dtype = config.dtype();
        let model = TrainedGenerator::new(config.generator_config(), config.seed, dtype)?;
        if config.ablation.use_contrastive_init {
            let archive = pretrain
                .ok_or_else(|| Error::Config("use_contrastive_init requires a stage-1 checkpoint".into()))?;
            encoder_from_pretrain(archive, &model.params)?;
        }
        Self::assemble(
            model,
            config.adam,
            config.effective_weights(),
            config.extractor.clone(),
            0,
        )
    }

    fn assemble(
        model: TrainedGenerator,
        adam: AdamConfig,
        weights: LossWeights,
        extractor: ExtractorConfig,
        step: u64,
    ) -> Result<Self> {
        let dtype = model.params.dtype();
        Ok(Self {
            model,
            optimizer: Adam::new(adam),
            weights,
            phi: FeatureExtractor::new(&extractor, dtype)?,
            psi: IdentityEmbedder::new(&extractor, dtype)?,
            extractor,
            step,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn lr(&self) -> f64 {
        self.optimizer.config.lr
    }

    pub fn style_extractor(&self) -> &FeatureExtractor {
        &self.phi
    }

    pub fn identity_embedder(&self) -> &IdentityEmbedder {
        &self.psi
    }

    pub fn extractor_config(&self) -> &ExtractorConfig {
        &self.extractor
    }

    /// Loss on `batch` with a live tape, without updating anything.
    pub fn loss(&self, batch: &JointBatch) -> Result<(Tensor, LossBreakdown)> {
        let out = self.model.generate(&batch.x_q, &batch.mask)?;
        let uv = batch.uv_refs();
        let targets = ScaleTargets::build(&batch.target, uv.as_deref(), &self.weights.scales())?;
        total_loss(&out, &targets, &self.weights, &self.phi, &self.psi)
    }

    /// generate → total loss → backprop → Adam.
    pub fn train_step(&mut self, batch: &JointBatch) -> Result<LossBreakdown> {
        let (loss, breakdown) = self.loss(batch)?;
        if !breakdown.total.is_finite() {
            return Err(Error::State(format!("non-finite loss at step {}", self.step + 1)));
        }
        let grads = loss.backward()?;
        self.optimizer.step(&self.model.params, &grads)?;
        self.step += 1;
        Ok(breakdown)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        self.model.save_into(&mut a)?;
        self.optimizer.save_into(&mut a, "opt.")?;
        a.put_json("joint.adam", &self.optimizer.config)?;
        a.put_json("joint.weights", &self.weights)?;
        a.put_json("joint.extractor", &self.extractor)?;
        a.put_json("joint.step", &self.step)?;
        Ok(a)
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let model = TrainedGenerator::from_archive(archive)?;
        let mut t = Self::assemble(
            model,
            archive.get_json("joint.adam")?,
            archive.get_json("joint.weights")?,
            archive.get_json("joint.extractor")?,
            archive.get_json("joint.step")?,
        )?;
        t.optimizer.load_from(archive, "opt.", &t.model.params)?;
        Ok(t)
    }
}

pub struct JointOutcome {
    pub trainer: JointTrainer,
    pub log: TrainingLog,
    pub stopped_early: bool,
}

/// Reads `config.pretrain_checkpoint` when the contrastive init is enabled.
pub fn resolve_pretrain(config: &RunConfig) -> Result<Option<Archive>> {
    if !config.ablation.use_contrastive_init {
        return Ok(None);
    }
    let path = config.pretrain_checkpoint.as_ref().ok_or_else(|| {
        Error::Config("use_contrastive_init is set but no pretrain_checkpoint is configured".into())
    })?;
    if !path.is_file() {
        return Err(Error::Config(format!(
            "pretrain checkpoint {} does not exist",
            path.display()
        )));
    }
    Ok(Some(Archive::load(path)?))
}

/// Stage 2 on `dataset` until `config.steps` (or the plateau rule).
///
/// `pretrain` is the stage-1 archive (ignored when resuming); `resume` is a
/// stage-2 archive from an earlier call.
pub fn run_joint(
    config: &RunConfig,
    dataset: &Dataset,
    pretrain: Option<&Archive>,
    resume: Option<&Archive>,
) -> Result<JointOutcome> {
    let trainer = match resume {
        Some(a) => JointTrainer::from_archive(a)?,
        None => JointTrainer::new(config, pretrain)?,
    };
    continue_joint(trainer, config, dataset)
}

/// Trains an existing state up to `config.steps`.
pub fn continue_joint(
    mut trainer: JointTrainer,
    config: &RunConfig,
    dataset: &Dataset,
) -> Result<JointOutcome> {
    let dtype = trainer.model.params.dtype();
    let batcher = Batcher::new(config.batch_size, config.seed)?;
    let mut log = open_log(config, JOINT_LOG)?;
    let mut totals = log.totals(Stage::Joint);
    let start = Instant::now();
    let mut stopped_early = false;
    while trainer.step() < config.steps {
        let samples = batcher.samples(dataset, trainer.step())?;
        let batch = JointBatch::from_samples(&samples, dtype)?;
        let breakdown = trainer.train_step(&batch)?;
        log.push(LogRecord::joint(
            trainer.step(),
            &breakdown,
            trainer.lr(),
            start.elapsed().as_secs_f64(),
        ))?;
        totals.push(breakdown.total);
        if let (Some(dir), Some(every)) = (&config.out_dir, config.checkpoint_every) {
            if every > 0 && trainer.step() % every == 0 {
                trainer
                    .to_archive()?
                    .save(&dir.join(format!("joint_step{:06}.ffar", trainer.step())))?;
            }
        }
        if config.plateau.is_some_and(|p| p.reached(&totals)) {
            stopped_early = true;
            break;
        }
    }
    if let Some(dir) = &config.out_dir {
        trainer.to_archive()?.save(&dir.join(JOINT_CHECKPOINT))?;
    }
    Ok(JointOutcome {
        trainer,
        log,
        stopped_early,
    })
}
