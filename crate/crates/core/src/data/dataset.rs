//! Dataset records, masked training samples and directory ingestion.
//!
//! On-disk layout: `<root>/<split>/images/*.png` (8-bit RGB) with optional
//! `<root>/<split>/uv/<stem>.npyish` files in the `UVF1` encoding.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::mask::{synthesize_mask, MaskKind, MaskSpec};
use crate::data::synthetic::generate_synthetic_face;
use crate::data::uv::UvField;
use crate::error::{Error, Result};
use crate::image::{ImageTensor, Mask};
use crate::util::mix;

pub const UV_EXTENSION: &str = "npyish";

/// One ground-truth face: target image plus optional UV field.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceRecord {
    pub name: String,
    pub target: ImageTensor,
    pub uv: Option<UvField>,
}

/// A training record: two differently masked views of one target.
#[derive(Debug, Clone)]
pub struct MaskedSample {
    pub x_q: ImageTensor,
    pub x_k: ImageTensor,
    pub mask: Mask,
    pub mask_k: Mask,
    pub target: ImageTensor,
    pub uv_gt: Option<UvField>,
}

/// How occlusion masks are drawn for a sample seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskPolicy {
    pub kinds: Vec<MaskKind>,
    pub coverage_min: f64,
    pub coverage_max: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            kinds: MaskKind::ALL.to_vec(),
            coverage_min: 0.15,
            coverage_max: 0.35,
        }
    }
}

impl MaskPolicy {
    pub fn spec(&self, seed: u64) -> Result<MaskSpec> {
        if self.kinds.is_empty() {
            return Err(Error::Config("mask policy lists no mask kinds".into()));
        }
        if !(self.coverage_min > 0.0 && self.coverage_min <= self.coverage_max) {
            return Err(Error::Config(format!(
                "mask coverage range [{}, {}] is empty",
                self.coverage_min, self.coverage_max
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = self.kinds[rng.random_range(0..self.kinds.len())];
        let coverage = if self.coverage_max > self.coverage_min {
            rng.random_range(self.coverage_min..=self.coverage_max)
        } else {
            self.coverage_min
        };
        MaskSpec::new(kind, coverage, rng.random())
    }

    pub fn mask(&self, seed: u64, h: usize, w: usize) -> Result<Mask> {
        synthesize_mask(&self.spec(seed)?, h, w)
    }
}

#[derive(Debug, Clone)]
pub struct ContrastivePair {
    pub x_q: ImageTensor,
    pub x_k: ImageTensor,
    pub mask_q: Mask,
    pub mask_k: Mask,
}

/// Occludes `target` with two masks drawn from independent child seeds.
pub fn make_contrastive_pair(target: &ImageTensor, rng_seed: u64) -> Result<ContrastivePair> {
    make_contrastive_pair_with(target, rng_seed, &MaskPolicy::default())
}

pub fn make_contrastive_pair_with(
    target: &ImageTensor,
    rng_seed: u64,
    policy: &MaskPolicy,
) -> Result<ContrastivePair> {
    let (h, w) = (target.height(), target.width());
    let mask_q = policy.mask(mix(rng_seed, 1), h, w)?;
    let mut mask_k = policy.mask(mix(rng_seed, 2), h, w)?;
    let mut retry = 3;
    // Two independent draws can coincide for tiny canvases; redraw.
    while mask_k == mask_q {
        mask_k = policy.mask(mix(rng_seed, retry), h, w)?;
        retry += 1;
    }
    Ok(ContrastivePair {
        x_q: target.occlude(&mask_q)?,
        x_k: target.occlude(&mask_k)?,
        mask_q,
        mask_k,
    })
}

/// An ordered collection of face records with a masking policy.
#[derive(Debug, Clone)]
pub struct Dataset {
    records: Vec<FaceRecord>,
    pub policy: MaskPolicy,
}

impl Dataset {
    pub fn new(records: Vec<FaceRecord>, policy: MaskPolicy) -> Result<Self> {
        if let Some(first) = records.first() {
            let dims = first.target.dims();
            for r in &records {
                if r.target.dims() != dims {
                    return Err(Error::Shape(format!(
                        "record `{}` has shape {:?}, expected {:?}",
                        r.name,
                        r.target.dims(),
                        dims
                    )));
                }
            }
        }
        Ok(Self { records, policy })
    }

    /// `count` procedural faces seeded from `seed`.
    pub fn synthetic(count: usize, h: usize, w: usize, seed: u64) -> Result<Self> {
        let records = (0..count)
            .map(|i| {
                let (target, uv) = generate_synthetic_face(mix(seed, i as u64), h, w)?;
                Ok(FaceRecord {
                    name: format!("face_{i:05}"),
                    target,
                    uv: Some(uv),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(records, MaskPolicy::default())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[FaceRecord] {
        &self.records
    }

    pub fn record(&self, index: usize) -> &FaceRecord {
        &self.records[index]
    }

    /// Image dims `(C, H, W)` shared by every record.
    pub fn image_dims(&self) -> Option<(usize, usize, usize)> {
        self.records.first().map(|r| r.target.dims())
    }

    /// Splits off the last `n` records.
    pub fn split_tail(mut self, n: usize) -> Result<(Dataset, Dataset)> {
        if n > self.records.len() {
            return Err(Error::Config(format!(
                "cannot hold out {n} of {} records",
                self.records.len()
            )));
        }
        let tail = self.records.split_off(self.records.len() - n);
        let policy = self.policy.clone();
        Ok((self, Dataset::new(tail, policy)?))
    }

    /// The masked sample for `index` under `seed`; pure in `(index, seed)`.
    pub fn sample(&self, index: usize, seed: u64) -> Result<MaskedSample> {
        let rec = &self.records[index];
        let pair = make_contrastive_pair_with(&rec.target, mix(seed, index as u64), &self.policy)?;
        Ok(MaskedSample {
            x_q: pair.x_q,
            x_k: pair.x_k,
            mask: pair.mask_q,
            mask_k: pair.mask_k,
            target: rec.target.clone(),
            uv_gt: rec.uv.clone(),
        })
    }

    pub fn samples(&self, seed: u64) -> impl Iterator<Item = Result<MaskedSample>> + '_ {
        (0..self.records.len()).map(move |i| self.sample(i, seed))
    }

    /// Writes the dataset in the on-disk layout under `<root>/<split>`.
    pub fn write(&self, root: &Path, split: &str) -> Result<()> {
        let images = root.join(split).join("images");
        let uv_dir = root.join(split).join("uv");
        std::fs::create_dir_all(&images)?;
        for rec in &self.records {
            rec.target.save_png(&images.join(format!("{}.png", rec.name)))?;
            if let Some(uv) = &rec.uv {
                std::fs::create_dir_all(&uv_dir)?;
                uv.save(&uv_dir.join(format!("{}.{UV_EXTENSION}", rec.name)))?;
            }
        }
        Ok(())
    }
}

/// Reads `<root>/<split>`; file order is sorted by name then shuffled by `shuffle_seed`.
pub fn load_dataset(root: &Path, split: &str, shuffle_seed: u64) -> Result<Dataset> {
    let images = root.join(split).join("images");
    if !images.is_dir() {
        return Err(Error::ingestion(&images, "image directory not found"));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&images)
        .map_err(|e| Error::ingestion(&images, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    if paths.is_empty() {
        return Err(Error::ingestion(&images, "no .png images found"));
    }
    paths.sort();
    paths.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));

    let uv_dir = root.join(split).join("uv");
    let mut records = Vec::with_capacity(paths.len());
    for path in paths {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::ingestion(&path, "non-UTF-8 file name"))?
            .to_string();
        let target = ImageTensor::load_png(&path)?;
        let uv_path = uv_dir.join(format!("{name}.{UV_EXTENSION}"));
        let uv = if uv_path.is_file() {
            let uv = UvField::load(&uv_path)?;
            if (uv.height(), uv.width()) != (target.height(), target.width()) {
                return Err(Error::ingestion(
                    &uv_path,
                    format!(
                        "uv field is {}x{} but image is {}x{}",
                        uv.height(),
                        uv.width(),
                        target.height(),
                        target.width()
                    ),
                ));
            }
            Some(uv)
        } else {
            None
        };
        records.push(FaceRecord { name, target, uv });
    }
    Dataset::new(records, MaskPolicy::default()).map_err(|e| Error::ingestion(&images, e))
}
