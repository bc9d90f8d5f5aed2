use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::joint::TrainedGenerator;
use crate::data::{Dataset, MaskedSample, UvField};
use crate::error::{Error, Result};
use crate::generator::mask_batch;
use crate::image::{ImageTensor, Mask};
use crate::losses::{ExtractorConfig, IdentityEmbedder};
use crate::metrics::{
    float_repr, frechet_distance, psnr, roc_auc, ssim, GaussianStats, SsimConfig, VerificationPair,
};
use crate::util::mix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub name: String,
    #[serde(with = "float_repr")]
    pub psnr: f64,
    /// PSNR of the raw masked input against the target.
    #[serde(with = "float_repr")]
    pub psnr_input: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: Vec<ImageRow>,
    #[serde(with = "float_repr")]
    pub psnr_mean: f64,
    #[serde(with = "float_repr")]
    pub psnr_input_mean: f64,
    #[serde(with = "float_repr")]
    pub ssim_mean: f64,
    #[serde(with = "float_repr")]
    pub frechet: f64,
    #[serde(with = "float_repr")]
    pub auc: f64,
    #[serde(with = "float_repr")]
    pub tpr_at_1pct: f64,
    #[serde(with = "float_repr")]
    pub tpr_at_0p1pct: f64,
    /// Masked UV error of the full-resolution field; `None` without UV heads
    /// or ground truth.
    pub uv_mse: Option<f64>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Frozen networks used only for evaluation. The Fréchet embedder is a
/// separately seeded copy of the identity architecture.
pub struct EvalEmbedders {
    pub identity: IdentityEmbedder,
    pub frechet: IdentityEmbedder,
}

impl EvalEmbedders {
    pub fn new(extractor: &ExtractorConfig, dtype: DType) -> Result<Self> {
        let fcfg = ExtractorConfig {
            seed: mix(extractor.seed, 0x0f1d),
            identity_dim: 32,
            ..extractor.clone()
        };
        Ok(Self {
            identity: IdentityEmbedder::new(extractor, dtype)?,
            frechet: IdentityEmbedder::new(&fcfg, dtype)?,
        })
    }
}

fn rows_f64(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// Masked squared UV error summed over valid pixels, and the valid count.
fn uv_error_sums(pred: &Tensor, gt: &[&UvField]) -> Result<(f64, usize)> {
    let fields = ImageTensor::from_batch_tensor(pred)?;
    let mut sum = 0.0;
    let mut count = 0;
    for (p, g) in fields.iter().zip(gt) {
        let (pu, pv) = (p.plane(0), p.plane(1));
        for (idx, &valid) in g.validity().iter().enumerate() {
            if valid == 1 {
                let du = pu[idx] as f64 - g.u()[idx] as f64;
                let dv = pv[idx] as f64 - g.v()[idx] as f64;
                sum += (du * du + dv * dv) / 2.0;
                count += 1;
            }
        }
    }
    Ok((sum, count))
}

/// Runs inference over `dataset` with masks drawn from `seed`, scoring every
/// image and pooling embeddings for Fréchet distance and verification.
///
/// Verification pairs: `(Ψ(Y_i), Ψ(Ŷ_i))` are genuine, `(Ψ(Y_i), Ψ(Ŷ_j))` for
/// `j ≠ i` are impostors.
pub fn evaluate_dataset(
    model: &TrainedGenerator,
    dataset: &Dataset,
    seed: u64,
    embedders: &EvalEmbedders,
    batch_size: usize,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    let dtype = model.params.dtype();
    let dev = Device::Cpu;
    let ssim_cfg = SsimConfig::default();
    let samples: Vec<MaskedSample> = dataset.samples(seed).collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(samples.len());
    let mut id_real = Vec::new();
    let mut id_fake = Vec::new();
    let mut fr_real = Vec::new();
    let mut fr_fake = Vec::new();
    let mut uv_sum = 0.0;
    let mut uv_count = 0usize;
    let mut uv_available = model.config.use_uv;

    for (chunk_idx, chunk) in samples.chunks(batch_size.max(1)).enumerate() {
        let xq: Vec<&ImageTensor> = chunk.iter().map(|s| &s.x_q).collect();
        let ys: Vec<&ImageTensor> = chunk.iter().map(|s| &s.target).collect();
        let masks: Vec<&Mask> = chunk.iter().map(|s| &s.mask).collect();
        let x = ImageTensor::batch_tensor(&xq, dtype, &dev)?;
        let y = ImageTensor::batch_tensor(&ys, dtype, &dev)?;
        let out = model.generate(&x, &mask_batch(&masks, dtype)?)?;
        let yhat = out.final_image()?.detach();
        let preds = ImageTensor::from_batch_tensor(&yhat)?;
        for (i, (s, p)) in chunk.iter().zip(&preds).enumerate() {
            rows.push(ImageRow {
                name: dataset.record(chunk_idx * batch_size.max(1) + i).name.clone(),
                psnr: psnr(p, &s.target, 1.0)?,
                psnr_input: psnr(&s.x_q, &s.target, 1.0)?,
                ssim: ssim(p, &s.target, &ssim_cfg)?,
            });
        }
        id_real.extend(rows_f64(&embedders.identity.embed(&y)?)?);
        id_fake.extend(rows_f64(&embedders.identity.embed(&yhat)?)?);
        fr_real.extend(rows_f64(&embedders.frechet.embed(&y)?)?);
        fr_fake.extend(rows_f64(&embedders.frechet.embed(&yhat)?)?);
        match (
            &out.scale(1)?.uv,
            chunk.iter().map(|s| s.uv_gt.as_ref()).collect::<Option<Vec<_>>>(),
        ) {
            (Some(pred), Some(gt)) => {
                let (s, c) = uv_error_sums(&pred.detach(), &gt)?;
                uv_sum += s;
                uv_count += c;
            }
            _ => uv_available = false,
        }
    }

    let n = rows.len();
    let mean = |f: fn(&ImageRow) -> f64| rows.iter().map(f).sum::<f64>() / n as f64;
    let frechet = frechet_distance(
        &GaussianStats::from_samples(&fr_real)?,
        &GaussianStats::from_samples(&fr_fake)?,
    )?;
    let (auc, t1, t01) = if n >= 2 {
        let mut pairs = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                pairs.push(VerificationPair {
                    embedding_a: id_real[i].clone(),
                    embedding_b: id_fake[j].clone(),
                    same_identity: i == j,
                });
            }
        }
        let roc = roc_auc(&pairs)?;
        (roc.auc, roc.tpr_at_1pct, roc.tpr_at_0p1pct)
    } else {
        (f64::NAN, f64::NAN, f64::NAN)
    };
    Ok(EvalReport {
        psnr_mean: mean(|r| r.psnr),
        psnr_input_mean: mean(|r| r.psnr_input),
        ssim_mean: mean(|r| r.ssim),
        images: rows,
        frechet,
        auc,
        tpr_at_1pct: t1,
        tpr_at_0p1pct: t01,
        uv_mse: (uv_available && uv_count > 0).then(|| uv_sum / uv_count as f64),
    })
}

/// Which optional artifacts `infer` writes next to each completed image.
#[derive(Debug, Clone, Copy, Default)]
pub struct InferOptions {
    pub emit_uv: bool,
    pub emit_alpha: bool,
}

/// Completes every `<input>/images/<stem>.png` using `<input>/masks/<stem>.png`
/// (white = missing) and writes `<out>/<stem>.png`, plus `<stem>.uv.npyish`
/// and `<stem>.alpha.png` on request. Returns the processed stems.
pub fn infer_directory(
    model: &TrainedGenerator,
    input: &Path,
    out: &Path,
    options: InferOptions,
) -> Result<Vec<String>> {
    let images = input.join("images");
    let masks = input.join("masks");
    if !images.is_dir() {
        return Err(Error::ingestion(&images, "image directory not found"));
    }
    let mut paths: Vec<_> = std::fs::read_dir(&images)
        .map_err(|e| Error::ingestion(&images, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    std::fs::create_dir_all(out)?;
    let dtype = model.params.dtype();
    let mut done = Vec::new();
    for path in paths {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::ingestion(&path, "non-UTF-8 file name"))?
            .to_string();
        let image = ImageTensor::load_png(&path)?;
        let mask_path = masks.join(format!("{stem}.png"));
        let mask = if mask_path.is_file() {
            Mask::load_png(&mask_path)?
        } else {
            Mask::empty(image.height(), image.width())
        };
        if (mask.height(), mask.width()) != (image.height(), image.width()) {
            return Err(Error::ingestion(&mask_path, "mask and image sizes differ"));
        }
        let x_q = image.occlude(&mask)?;
        let x = x_q.to_tensor(dtype, &Device::Cpu)?;
        let m = mask_batch(&[&mask], dtype)?;
        let result = model.generate(&x, &m)?;
        let y = ImageTensor::from_batch_tensor(&result.final_image()?)?.remove(0);
        y.save_png(&out.join(format!("{stem}.png")))?;
        let s1 = result.scale(1)?;
        if options.emit_uv {
            if let Some(uv) = &s1.uv {
                let field = ImageTensor::from_batch_tensor(uv)?.remove(0);
                let (_, h, w) = field.dims();
                let valid = vec![1u8; h * w];
                let u = field.plane(0).to_vec();
                let v = field.plane(1).to_vec();
                UvField::new(h, w, u, v, valid)?
                    .save(&out.join(format!("{stem}.uv.{}", crate::data::dataset::UV_EXTENSION)))?;
            }
        }
        if options.emit_alpha {
            if let Some(alpha) = &s1.alpha {
                let a = alpha.mean_keepdim(1)?;
                ImageTensor::from_batch_tensor(&a)?
                    .remove(0)
                    .save_png(&out.join(format!("{stem}.alpha.png")))?;
            }
        }
        done.push(stem);
    }
    Ok(done)
}
