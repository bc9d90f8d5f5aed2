//! Stage-2 encoder–decoder.
//!
//! The trunk sees the masked image with the mask as a fourth channel. The
//! decoder mirrors it: decoder scale `k` (1 = full resolution) upsamples the
//! next-deeper map by nearest neighbour, concatenates the same-resolution
//! encoder skip, and applies a 3×3 convolution. At every output scale a fusion
//! module emits an image and a 2-channel head emits a UV field.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::contrastive::{EncoderConfig, Trunk};
use crate::daf::{Daf, DafConfig, IMAGE_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, upsample_nearest, Builder, Conv2d, Init, ParamStore};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub num_scales: usize,
    /// Scales at which images (and UV fields) are emitted.
    pub daf_scales: BTreeSet<usize>,
    /// Scales whose outputs feed the texture losses.
    pub texture_scales: BTreeSet<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_scales: 6,
            daf_scales: (1..=6).collect(),
            texture_scales: (1..=3).collect(),
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        if self.num_scales == 0 || self.num_scales > encoder.num_stages {
            return Err(Error::Config(format!(
                "decoder scales {} must be within 1..={}",
                self.num_scales, encoder.num_stages
            )));
        }
        if !self.daf_scales.contains(&1) {
            return Err(Error::Config(
                "output scales must include full resolution (1)".into(),
            ));
        }
        if let Some(&k) = self.daf_scales.iter().find(|&&k| k == 0 || k > self.num_scales) {
            return Err(Error::Config(format!(
                "output scale {k} outside 1..={}",
                self.num_scales
            )));
        }
        if !self.texture_scales.is_subset(&self.daf_scales) {
            return Err(Error::Config(
                "texture scales must be a subset of output scales".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Image encoder; `in_channels` counts image channels only, the mask
    /// channel is added internally.
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub daf: DafConfig,
    pub use_daf: bool,
    pub use_uv: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            daf: DafConfig::default(),
            use_daf: true,
            use_uv: true,
        }
    }
}

impl GeneratorConfig {
    fn trunk_config(&self) -> EncoderConfig {
        EncoderConfig {
            in_channels: self.encoder.in_channels + 1,
            ..self.encoder
        }
    }

    /// Channels of decoder scale `k`, mirroring encoder stage `k`.
    pub fn decoder_width(&self, k: usize) -> usize {
        self.encoder.stage_width(k)
    }
}

/// Outputs at one decoder scale.
#[derive(Debug, Clone)]
pub struct ScaleOutput {
    /// Fused image `[B, 3, h, w]`; unclamped.
    pub image: Tensor,
    /// Spatial attention `[B, 3, h, w]`; absent when fusion is disabled.
    pub alpha: Option<Tensor>,
    /// Predicted UV field `[B, 2, h, w]`; absent when UV heads are disabled.
    pub uv: Option<Tensor>,
}

#[derive(Debug, Clone, Default)]
pub struct MultiScaleOutput {
    pub scales: BTreeMap<usize, ScaleOutput>,
}

impl MultiScaleOutput {
    pub fn scale(&self, k: usize) -> Result<&ScaleOutput> {
        self.scales
            .get(&k)
            .ok_or_else(|| Error::Contract(format!("no output at decoder scale {k}")))
    }

    /// Full-resolution image clamped to `[0, 1]`, as used at inference.
    pub fn final_image(&self) -> Result<Tensor> {
        Ok(self.scale(1)?.image.clamp(0.0, 1.0)?)
    }
}

#[derive(Debug, Clone)]
enum ImageHead {
    Fusion(Daf),
    Plain(Conv2d),
}

#[derive(Debug, Clone)]
struct Heads {
    image: ImageHead,
    uv: Option<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    trunk: Trunk,
    decoder: Vec<Conv2d>,
    heads: BTreeMap<usize, Heads>,
}

impl Generator {
    pub fn new(b: &Builder, config: GeneratorConfig) -> Result<Self> {
        config.encoder.validate()?;
        config.decoder.validate(&config.encoder)?;
        let tc = config.trunk_config();
        let trunk = Trunk::new(&b.pp("enc"), tc)?;
        let stages = tc.num_stages;
        let mut decoder = Vec::with_capacity(stages);
        for k in 1..=stages {
            let from_below = config.decoder_width((k + 1).min(stages));
            let skip = if k == 1 {
                tc.in_channels
            } else {
                tc.stage_width(k - 1)
            };
            decoder.push(Conv2d::same3(
                &b.pp(format!("dec.s{k}")),
                from_below + skip,
                config.decoder_width(k),
            )?);
        }
        let mut heads = BTreeMap::new();
        for &k in &config.decoder.daf_scales {
            let width = config.decoder_width(k);
            let image = if config.use_daf {
                ImageHead::Fusion(Daf::new(&b.pp(format!("daf{k}")), width, config.daf)?)
            } else {
                ImageHead::Plain(Conv2d::new(
                    &b.pp(format!("head{k}")),
                    width,
                    IMAGE_CHANNELS,
                    3,
                    1,
                    Init::Normal((1.0 / (width * 9) as f64).sqrt()),
                    true,
                )?)
            };
            let uv = if config.use_uv {
                Some(Conv2d::new(
                    &b.pp(format!("uv{k}")),
                    width,
                    2,
                    3,
                    1,
                    Init::Normal(0.5 * (1.0 / (width * 9) as f64).sqrt()),
                    true,
                )?)
            } else {
                None
            };
            heads.insert(k, Heads { image, uv });
        }
        Ok(Self {
            config,
            trunk,
            decoder,
            heads,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// `x_q`: `[B, 3, H, W]`; `mask`: `[B, 1, H, W]` with 1 on missing pixels.
    pub fn generate(&self, x_q: &Tensor, mask: &Tensor) -> Result<MultiScaleOutput> {
        let (b, c, h, w) = x_q.dims4()?;
        if c != self.config.encoder.in_channels {
            return Err(Error::Shape(format!(
                "generator expects {} image channels, got {c}",
                self.config.encoder.in_channels
            )));
        }
        if mask.dims4()? != (b, 1, h, w) {
            return Err(Error::Shape(format!(
                "mask {:?} not aligned with input {:?}",
                mask.dims(),
                x_q.dims()
            )));
        }
        let input = Tensor::cat(&[x_q, &mask.to_dtype(x_q.dtype())?], 1)?;
        let feats = self.trunk.forward(&input)?;
        let stages = feats.len();

        let mut out = MultiScaleOutput::default();
        let mut current = feats[stages - 1].clone();
        for k in (1..=stages).rev() {
            let skip = if k == 1 { &input } else { &feats[k - 2] };
            let (_, _, sh, _) = skip.dims4()?;
            let up = upsample_nearest(&current, sh / current.dims4()?.2)?;
            current = self.decoder[k - 1]
                .forward(&Tensor::cat(&[&up, skip], 1)?)?
                .relu()?;
            if let Some(heads) = self.heads.get(&k) {
                let (image, alpha) = match &heads.image {
                    ImageHead::Fusion(daf) => {
                        let (y, a) = daf.forward(&current, x_q)?;
                        (y, Some(a))
                    }
                    ImageHead::Plain(conv) => (conv.forward(&current)?, None),
                };
                let uv = match &heads.uv {
                    Some(conv) => Some(sigmoid(&conv.forward(&current)?)?),
                    None => None,
                };
                out.scales.insert(k, ScaleOutput { image, alpha, uv });
            }
        }
        Ok(out)
    }
}

/// Copies the stage-1 query trunk from a pretraining archive into `params`.
///
/// The projection head is dropped. The first-stage kernel gains a zero-
/// initialized slice for the mask channel.
pub fn encoder_from_pretrain(archive: &Archive, params: &ParamStore) -> Result<()> {
    let prefix = "query.trunk.";
    let names: Vec<String> = archive
        .names()
        .filter(|n| n.starts_with(prefix))
        .map(str::to_string)
        .collect();
    if names.is_empty() {
        return Err(Error::Checkpoint("archive holds no stage-1 query trunk".into()));
    }
    let trunk_params: Vec<String> = params
        .names()
        .into_iter()
        .filter(|n| n.starts_with("enc."))
        .collect();
    if trunk_params.len() != names.len() {
        return Err(Error::Checkpoint(format!(
            "pretrained trunk has {} tensors, generator trunk has {}",
            names.len(),
            trunk_params.len()
        )));
    }
    for name in names {
        let target = format!("enc.{}", &name[prefix.len()..]);
        let var = params
            .get(&target)
            .ok_or_else(|| Error::Checkpoint(format!("generator has no parameter `{target}`")))?;
        let mut src = archive.get_tensor(&name, params.dtype(), params.device())?;
        let want = var.dims().to_vec();
        if src.rank() == 4 && want.len() == 4 && src.dims()[1] + 1 == want[1] && src.dims()[0] == want[0] {
            let (o, i, kh, kw) = src.dims4()?;
            let pad = Tensor::zeros((o, 1, kh, kw), params.dtype(), params.device())?;
            src = Tensor::cat(&[&src, &pad], 1)?;
            debug_assert_eq!(i + 1, want[1]);
        }
        if src.dims() != want.as_slice() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {:?}, generator expects {want:?}",
                src.dims()
            )));
        }
        params.assign(&target, &src)?;
    }
    Ok(())
}

/// Builds the `[B, 1, H, W]` float mask tensor for a batch of masks.
pub fn mask_batch(masks: &[&crate::image::Mask], dtype: DType) -> Result<Tensor> {
    let images: Vec<_> = masks.iter().map(|m| m.to_image()).collect();
    let refs: Vec<_> = images.iter().collect();
    crate::image::ImageTensor::batch_tensor(&refs, dtype, &candle_core::Device::Cpu)
}
