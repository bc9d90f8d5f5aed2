//! Stage-2 objectives.
//!
//! Structure terms (L1 reconstruction, masked UV error) are averaged over the
//! scale set `P`; texture terms (Gram style, identity embedding MSE) over `Q`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::data::UvField;
use crate::error::{Error, Result};
use crate::generator::MultiScaleOutput;
use crate::image::ImageTensor;
use crate::nn::{area_downsample, Builder, Conv2d, Init, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub rec: f64,
    pub uv: f64,
    pub style: f64,
    pub ip: f64,
    /// Structure scales `P`.
    pub structure_scales: BTreeSet<usize>,
    /// Texture scales `Q`.
    pub texture_scales: BTreeSet<usize>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 6.0,
            uv: 0.1,
            style: 240.0,
            ip: 0.1,
            structure_scales: (1..=6).collect(),
            texture_scales: (1..=3).collect(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("rec", self.rec),
            ("uv", self.uv),
            ("style", self.style),
            ("ip", self.ip),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weight `{name}` must be finite and >= 0, got {w}"
                )));
            }
        }
        if self.structure_scales.is_empty() {
            return Err(Error::Config("structure scale set is empty".into()));
        }
        if !self.texture_scales.is_subset(&self.structure_scales) {
            return Err(Error::Config(
                "texture scales must be a subset of structure scales".into(),
            ));
        }
        Ok(())
    }

    /// All scales any term reads.
    pub fn scales(&self) -> BTreeSet<usize> {
        self.structure_scales
            .union(&self.texture_scales)
            .copied()
            .collect()
    }
}

/// Where frozen extractor weights come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum ExtractorBackend {
    #[default]
    RandomSeeded,
    /// Archive whose names match the seeded network's parameter names.
    ExternalWeights { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    #[serde(default)]
    pub backend: ExtractorBackend,
    pub seed: u64,
    /// Stage widths of the style network Φ.
    pub style_widths: Vec<usize>,
    /// Stage widths of the identity network Ψ.
    pub identity_widths: Vec<usize>,
    pub identity_dim: usize,
    /// Weight init gain relative to He scaling.
    pub gain: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            backend: ExtractorBackend::RandomSeeded,
            seed: 0x5eed_f00d,
            style_widths: vec![8, 16, 16],
            identity_widths: vec![8, 16, 32],
            identity_dim: 128,
            gain: 1.0,
        }
    }
}

fn strided_stack(b: &Builder, cin: usize, widths: &[usize], gain: f64) -> Result<Vec<Conv2d>> {
    let mut cin = cin;
    let mut out = Vec::with_capacity(widths.len());
    for (i, &w) in widths.iter().enumerate() {
        let std = gain * (2.0 / (cin * 9) as f64).sqrt();
        out.push(Conv2d::new(
            &b.pp(format!("s{}", i + 1)),
            cin,
            w,
            3,
            2,
            Init::Normal(std),
            true,
        )?);
        cin = w;
    }
    Ok(out)
}

fn frozen_store(config: &ExtractorConfig, dtype: DType) -> ParamStore {
    ParamStore::new(config.seed, dtype)
}

fn load_external(store: &ParamStore, config: &ExtractorConfig) -> Result<()> {
    if let ExtractorBackend::ExternalWeights { path } = &config.backend {
        let archive = Archive::load(path)?;
        store.load_from(&archive, "")?;
    }
    Ok(())
}

/// Frozen multi-tap feature network Φ.
///
/// Weights live in a private store and are read through detached views, so
/// no optimizer can reach them while gradients still flow to the input.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    store: ParamStore,
    stages: Vec<Conv2d>,
}

impl FeatureExtractor {
    pub fn new(config: &ExtractorConfig, dtype: DType) -> Result<Self> {
        if config.style_widths.is_empty() {
            return Err(Error::Config("style extractor needs at least one stage".into()));
        }
        let store = frozen_store(config, dtype);
        strided_stack(&store.root().pp("phi"), 3, &config.style_widths, config.gain)?;
        load_external(&store, config)?;
        let stages = strided_stack(
            &store.frozen_root().pp("phi"),
            3,
            &config.style_widths,
            config.gain,
        )?;
        Ok(Self { store, stages })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_taps(&self) -> usize {
        self.stages.len()
    }

    /// Smallest input side that leaves every tap at least 1×1.
    pub fn min_side(&self) -> usize {
        1 << self.stages.len()
    }

    pub fn taps(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, _, h, w) = x.dims4()?;
        if h.min(w) < self.min_side() {
            return Err(Error::Config(format!(
                "style extractor needs inputs of at least {0}x{0}, got {h}x{w}",
                self.min_side()
            )));
        }
        let mut out = Vec::with_capacity(self.stages.len());
        let mut cur = x.clone();
        for s in &self.stages {
            cur = s.forward(&cur)?.relu()?;
            out.push(cur.clone());
        }
        Ok(out)
    }
}

/// Frozen identity embedder Ψ: strided stack, global pool, linear map.
#[derive(Debug, Clone)]
pub struct IdentityEmbedder {
    store: ParamStore,
    stages: Vec<Conv2d>,
    head: Linear,
}

impl IdentityEmbedder {
    pub fn new(config: &ExtractorConfig, dtype: DType) -> Result<Self> {
        let widths = &config.identity_widths;
        if widths.is_empty() || config.identity_dim == 0 {
            return Err(Error::Config(
                "identity embedder needs stages and a non-zero dimension".into(),
            ));
        }
        let store = frozen_store(config, dtype);
        let build = |b: Builder| -> Result<(Vec<Conv2d>, Linear)> {
            let b = b.pp("psi");
            let stages = strided_stack(&b, 3, widths, config.gain)?;
            let head = Linear::new(&b.pp("head"), *widths.last().unwrap(), config.identity_dim)?;
            Ok((stages, head))
        };
        build(store.root())?;
        load_external(&store, config)?;
        let (stages, head) = build(store.frozen_root())?;
        Ok(Self { store, stages, head })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for s in &self.stages {
            cur = s.forward(&cur)?.relu()?;
        }
        let pooled = cur.mean(3)?.mean(2)?;
        self.head.forward(&pooled)
    }
}

/// Mean absolute error.
pub fn rec_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same(pred, target, "reconstruction")?;
    Ok((pred - target)?.abs()?.mean_all()?)
}

/// Squared UV error averaged over valid pixels and both channels.
///
/// `validity` is `[B, 1, h, w]` with 1 on the face. Returns 0 when no pixel
/// is valid.
pub fn uv_loss(pred: &Tensor, target: &Tensor, validity: &Tensor) -> Result<Tensor> {
    check_same(pred, target, "uv")?;
    let (b, c, h, w) = pred.dims4()?;
    if c != 2 || validity.dims4()? != (b, 1, h, w) {
        return Err(Error::Shape(format!(
            "uv loss expects [B,2,h,w] fields and [B,1,h,w] validity, got {:?} and {:?}",
            pred.dims(),
            validity.dims()
        )));
    }
    let n_valid = validity.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let masked = (pred - target)?.broadcast_mul(validity)?;
    let sum = masked.sqr()?.sum_all()?;
    if n_valid == 0.0 {
        return Ok((sum * 0.0)?);
    }
    Ok((sum / (2.0 * n_valid))?)
}

/// Per-sample Gram matrices `X Xᵀ` of `[B, C, h, w]` features, unnormalized.
pub fn gram(features: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = features.dims4()?;
    let flat = features.reshape((b, c, h * w))?;
    Ok(flat.matmul(&flat.transpose(1, 2)?.contiguous()?)?)
}

/// `(1/N) Σ_i (1/C_i²) ‖G(Φ^i(Y)) − G(Φ^i(Ŷ))‖₁`, averaged over the batch.
pub fn style_loss(pred: &Tensor, target: &Tensor, phi: &FeatureExtractor) -> Result<Tensor> {
    check_same(pred, target, "style")?;
    let batch = pred.dims()[0] as f64;
    let fp = phi.taps(pred)?;
    let ft = phi.taps(target)?;
    let n = fp.len() as f64;
    let mut total: Option<Tensor> = None;
    for (p, t) in fp.iter().zip(&ft) {
        let c = p.dims()[1] as f64;
        let term = ((gram(t)? - gram(p)?)?.abs()?.sum_all()? / (c * c * n * batch))?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    Ok(total.expect("extractor has at least one tap"))
}

/// Mean squared error between identity embeddings.
pub fn ip_loss(pred: &Tensor, target: &Tensor, psi: &IdentityEmbedder) -> Result<Tensor> {
    check_same(pred, target, "identity")?;
    let ep = psi.embed(pred)?;
    let et = psi.embed(target)?;
    Ok((ep - et)?.sqr()?.mean_all()?)
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what} loss operands disagree: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// UV ground truth at one scale.
#[derive(Debug, Clone)]
pub struct UvTarget {
    /// `[B, 2, h, w]`.
    pub field: Tensor,
    /// `[B, 1, h, w]`.
    pub validity: Tensor,
}

/// Ground truth matched to every decoder scale by area averaging.
#[derive(Debug, Clone, Default)]
pub struct ScaleTargets {
    pub images: BTreeMap<usize, Tensor>,
    pub uv: BTreeMap<usize, UvTarget>,
}

impl ScaleTargets {
    /// `target` is the full-resolution `[B, 3, H, W]` batch. UV targets are
    /// built only when every sample carries a field.
    pub fn build(target: &Tensor, uv: Option<&[&UvField]>, scales: &BTreeSet<usize>) -> Result<Self> {
        let mut out = Self::default();
        let dtype = target.dtype();
        let device = target.device();
        for &k in scales {
            let factor = 1usize << (k - 1);
            out.images.insert(k, area_downsample(target, factor)?);
            if let Some(fields) = uv {
                out.uv.insert(k, uv_batch(fields, factor, dtype, device)?);
            }
        }
        Ok(out)
    }
}

fn uv_batch(fields: &[&UvField], factor: usize, dtype: DType, device: &Device) -> Result<UvTarget> {
    let mut uvs = Vec::with_capacity(fields.len());
    let mut valid = Vec::with_capacity(fields.len());
    for f in fields {
        let d = f.downsample(factor)?;
        uvs.push(d.uv_image());
        valid.push(d.validity_image());
    }
    let uv_refs: Vec<&ImageTensor> = uvs.iter().collect();
    let valid_refs: Vec<&ImageTensor> = valid.iter().collect();
    Ok(UvTarget {
        field: ImageTensor::batch_tensor(&uv_refs, dtype, device)?,
        validity: ImageTensor::batch_tensor(&valid_refs, dtype, device)?,
    })
}

/// Unweighted terms at one scale; absent terms are not computed there.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScaleTerms {
    pub rec: Option<f64>,
    pub uv: Option<f64>,
    pub style: Option<f64>,
    pub ip: Option<f64>,
}

/// Scale-averaged, unweighted terms and the weighted total.
///
/// `total = λ_rec·rec + λ_uv·uv + λ_style·style + λ_ip·ip`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub uv: f64,
    pub style: f64,
    pub ip: f64,
    pub total: f64,
    pub per_scale: BTreeMap<usize, ScaleTerms>,
}

impl LossBreakdown {
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        w.rec * self.rec + w.uv * self.uv + w.style * self.style + w.ip * self.ip
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// The multi-scale objective. UV terms are 0 at scales whose output or
/// target lacks a UV field.
pub fn total_loss(
    outputs: &MultiScaleOutput,
    targets: &ScaleTargets,
    weights: &LossWeights,
    phi: &FeatureExtractor,
    psi: &IdentityEmbedder,
) -> Result<(Tensor, LossBreakdown)> {
    weights.validate()?;
    let mut breakdown = LossBreakdown::default();
    let p = weights.structure_scales.len() as f64;
    let q = weights.texture_scales.len() as f64;
    let mut structure: Vec<Tensor> = Vec::new();
    let mut texture: Vec<Tensor> = Vec::new();

    for &k in &weights.scales() {
        let out = outputs.scale(k)?;
        let target = targets
            .images
            .get(&k)
            .ok_or_else(|| Error::Contract(format!("no target image at scale {k}")))?;
        let mut terms = ScaleTerms::default();
        if weights.structure_scales.contains(&k) {
            let rec = rec_loss(&out.image, target)?;
            terms.rec = Some(scalar(&rec)?);
            structure.push((rec * weights.rec)?);
            if let (Some(pred), Some(gt)) = (&out.uv, targets.uv.get(&k)) {
                let uv = uv_loss(pred, &gt.field, &gt.validity)?;
                terms.uv = Some(scalar(&uv)?);
                if weights.uv > 0.0 {
                    structure.push((uv * weights.uv)?);
                }
            }
        }
        if weights.texture_scales.contains(&k) {
            if weights.style > 0.0 {
                let style = style_loss(&out.image, target, phi)?;
                terms.style = Some(scalar(&style)?);
                texture.push((style * weights.style)?);
            } else {
                terms.style = Some(0.0);
            }
            if weights.ip > 0.0 {
                let ip = ip_loss(&out.image, target, psi)?;
                terms.ip = Some(scalar(&ip)?);
                texture.push((ip * weights.ip)?);
            } else {
                terms.ip = Some(0.0);
            }
        }
        breakdown.per_scale.insert(k, terms);
    }

    let mean_of = |f: fn(&ScaleTerms) -> Option<f64>, count: f64| -> f64 {
        // Folded from +0.0: an empty f64 `sum` is -0.0.
        breakdown.per_scale.values().filter_map(f).fold(0.0, |a, b| a + b) / count
    };
    breakdown.rec = mean_of(|t| t.rec, p);
    breakdown.uv = mean_of(|t| t.uv, p);
    breakdown.style = mean_of(|t| t.style, q.max(1.0));
    breakdown.ip = mean_of(|t| t.ip, q.max(1.0));
    breakdown.total = breakdown.recombine(weights);

    let device = outputs
        .scale(1)
        .map(|s| s.image.device().clone())
        .unwrap_or(Device::Cpu);
    let dtype = outputs.scale(1).map(|s| s.image.dtype()).unwrap_or(DType::F32);
    let sum = |parts: Vec<Tensor>, count: f64| -> Result<Tensor> {
        let mut acc = Tensor::zeros((), dtype, &device)?;
        for t in parts {
            acc = (acc + t)?;
        }
        Ok((acc / count)?)
    };
    let mut loss = sum(structure, p)?;
    if q > 0.0 {
        loss = (loss + sum(texture, q)?)?;
    }
    Ok((loss, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev() -> Device {
        Device::Cpu
    }

    fn extractors() -> (FeatureExtractor, IdentityEmbedder) {
        let cfg = ExtractorConfig::default();
        (
            FeatureExtractor::new(&cfg, DType::F64).unwrap(),
            IdentityEmbedder::new(&cfg, DType::F64).unwrap(),
        )
    }

    #[test]
    fn rec_and_uv_offsets() {
        let y = Tensor::rand(0f64, 1.0, (2, 3, 8, 8), &dev()).unwrap();
        let l = rec_loss(&(&y + 0.5).unwrap(), &y)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((l - 0.5).abs() < 1e-12);

        let c = Tensor::rand(0f64, 0.8, (2, 2, 8, 8), &dev()).unwrap();
        let valid = Tensor::rand(0f64, 1.0, (2, 1, 8, 8), &dev())
            .unwrap()
            .ge(0.5)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap();
        let shifted = (&c + valid.broadcast_as(c.shape()).unwrap().affine(0.1, 0.0).unwrap()).unwrap();
        let l = uv_loss(&shifted, &c, &valid).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 0.01).abs() < 1e-12, "{l}");
    }

    #[test]
    fn uv_without_valid_pixels_is_zero() {
        let c = Tensor::rand(0f64, 1.0, (1, 2, 4, 4), &dev()).unwrap();
        let z = Tensor::zeros((1, 2, 4, 4), DType::F64, &dev()).unwrap();
        let v = Tensor::zeros((1, 1, 4, 4), DType::F64, &dev()).unwrap();
        assert_eq!(uv_loss(&c, &z, &v).unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn gram_of_constant_single_channel() {
        let x = Tensor::full(0.3f64, (1, 1, 4, 5), &dev()).unwrap();
        let g: Vec<f64> = gram(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(g.len(), 1);
        assert!((g[0] - 0.09 * 20.0).abs() < 1e-12);
    }

    #[test]
    fn zero_at_perfect_prediction() {
        let (phi, psi) = extractors();
        let y = Tensor::rand(0f64, 1.0, (2, 3, 16, 16), &dev()).unwrap();
        assert_eq!(rec_loss(&y, &y).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        assert_eq!(style_loss(&y, &y, &phi).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        assert_eq!(ip_loss(&y, &y, &psi).unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn style_rejects_tiny_inputs() {
        let (phi, _) = extractors();
        let y = Tensor::rand(0f64, 1.0, (1, 3, 4, 4), &dev()).unwrap();
        assert!(matches!(style_loss(&y, &y, &phi), Err(Error::Config(_))));
    }

    #[test]
    fn extractors_are_deterministic() {
        let (a, _) = extractors();
        let (b, _) = extractors();
        assert_eq!(
            a.params().fingerprint().unwrap(),
            b.params().fingerprint().unwrap()
        );
    }

    #[test]
    fn external_weights_round_trip() {
        let cfg = ExtractorConfig::default();
        let phi = FeatureExtractor::new(&cfg, DType::F32).unwrap();
        let mut archive = Archive::new();
        phi.params().save_into(&mut archive, "").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("phi.ffar");
        archive.save(&path).unwrap();
        let ext = ExtractorConfig {
            backend: ExtractorBackend::ExternalWeights { path },
            seed: 99,
            ..cfg
        };
        let loaded = FeatureExtractor::new(&ext, DType::F32).unwrap();
        assert_eq!(
            loaded.params().fingerprint().unwrap(),
            phi.params().fingerprint().unwrap()
        );
    }
}
