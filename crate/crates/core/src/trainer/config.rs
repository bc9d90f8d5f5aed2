use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::contrastive::{ContrastiveConfig, EncoderConfig, PretrainConfig};
use crate::daf::DafConfig;
use crate::data::{load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::generator::{DecoderConfig, GeneratorConfig};
use crate::losses::{ExtractorConfig, LossWeights};
use crate::optim::{AdamConfig, SgdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    #[default]
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        count: usize,
        height: usize,
        width: usize,
        seed: u64,
    },
    Directory {
        root: PathBuf,
        split: String,
        #[serde(default)]
        shuffle_seed: u64,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            count: 64,
            height: 128,
            width: 128,
            seed: 0,
        }
    }
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic {
                count,
                height,
                width,
                seed,
            } => Dataset::synthetic(*count, *height, *width, *seed),
            DataSource::Directory {
                root,
                split,
                shuffle_seed,
            } => load_dataset(root, split, *shuffle_seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub use_contrastive_init: bool,
    pub use_daf: bool,
    pub use_uv: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_contrastive_init: true,
            use_daf: true,
            use_uv: true,
        }
    }
}

impl Ablation {
    /// All eight combinations, `(false, false, false)` first.
    pub fn all() -> Vec<Ablation> {
        (0..8)
            .map(|i| Ablation {
                use_contrastive_init: i & 4 != 0,
                use_daf: i & 2 != 0,
                use_uv: i & 1 != 0,
            })
            .collect()
    }

    pub fn label(&self) -> String {
        let f = |b: bool, s: &str| if b { s.to_string() } else { format!("no-{s}") };
        format!(
            "{}+{}+{}",
            f(self.use_contrastive_init, "cl"),
            f(self.use_daf, "daf"),
            f(self.use_uv, "uv")
        )
    }
}

/// Stop once the mean loss over the latest `window` steps improves on the
/// preceding window by less than `min_rel_improvement`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauRule {
    pub window: usize,
    pub min_rel_improvement: f64,
}

impl Default for PlateauRule {
    fn default() -> Self {
        Self {
            window: 50,
            min_rel_improvement: 0.005,
        }
    }
}

impl PlateauRule {
    pub fn reached(&self, losses: &[f64]) -> bool {
        let w = self.window;
        if w == 0 || losses.len() < 2 * w {
            return false;
        }
        let n = losses.len();
        let cur: f64 = losses[n - w..].iter().sum::<f64>() / w as f64;
        let prev: f64 = losses[n - 2 * w..n - w].iter().sum::<f64>() / w as f64;
        if prev <= 0.0 {
            return true;
        }
        (prev - cur) / prev < self.min_rel_improvement
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub stage: Stage,
    pub seed: u64,
    pub data: DataSource,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub daf: DafConfig,
    pub contrastive: ContrastiveConfig,
    pub momentum: f64,
    pub queue_capacity: usize,
    pub weights: LossWeights,
    pub extractor: ExtractorConfig,
    pub sgd: SgdConfig,
    pub adam: AdamConfig,
    pub ablation: Ablation,
    pub batch_size: usize,
    pub steps: u64,
    /// Write an intermediate checkpoint every this many steps.
    pub checkpoint_every: Option<u64>,
    pub plateau: Option<PlateauRule>,
    /// Checkpoints and logs go here; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    pub pretrain_checkpoint: Option<PathBuf>,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pretrain = PretrainConfig::default();
        Self {
            stage: Stage::Joint,
            seed: 0,
            data: DataSource::default(),
            encoder: pretrain.encoder,
            decoder: DecoderConfig::default(),
            daf: DafConfig::default(),
            contrastive: pretrain.contrastive,
            momentum: pretrain.momentum,
            queue_capacity: pretrain.queue_capacity,
            weights: LossWeights::default(),
            extractor: ExtractorConfig::default(),
            sgd: SgdConfig::default(),
            adam: AdamConfig::default(),
            ablation: Ablation::default(),
            batch_size: 8,
            steps: 1000,
            checkpoint_every: None,
            plateau: None,
            out_dir: None,
            pretrain_checkpoint: None,
            precision: Precision::F32,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `dotted.key=value` overrides. Values parse as TOML, falling
    /// back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let value = parse_value(raw.trim());
            set_path(&mut root, key.trim(), value)?;
        }
        root.try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            encoder: self.encoder,
            contrastive: self.contrastive,
            momentum: self.momentum,
            queue_capacity: self.queue_capacity,
            sgd: self.sgd,
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            encoder: self.encoder,
            decoder: self.decoder.clone(),
            daf: self.daf,
            use_daf: self.ablation.use_daf,
            use_uv: self.ablation.use_uv,
        }
    }

    /// Loss weights after ablation: disabling UV zeroes its weight.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights.clone();
        if !self.ablation.use_uv {
            w.uv = 0.0;
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.encoder.validate()?;
        self.decoder.validate(&self.encoder)?;
        self.weights.validate()?;
        if !self.weights.scales().is_subset(&self.decoder.daf_scales) {
            return Err(Error::Config(
                "every loss scale must be an output scale of the decoder".into(),
            ));
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{part}` is not inside a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::Config("empty override key".into()))
}
