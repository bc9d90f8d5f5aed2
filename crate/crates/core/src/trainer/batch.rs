use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, MaskedSample, UvField};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, Mask};
use crate::util::mix;

/// Deterministic minibatches: the batch for a step depends only on
/// `(seed, step)`, never on earlier calls, so resumed runs see the same data.
///
/// Sample `i` of step `t` sits at global position `g = t·B + i`; records are
/// visited in a fresh permutation every epoch, and `g` also seeds the masks.
#[derive(Debug, Clone, Copy)]
pub struct Batcher {
    pub batch_size: usize,
    pub seed: u64,
}

impl Batcher {
    pub fn new(batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(Self { batch_size, seed })
    }

    fn permutation(&self, n: usize, epoch: u64) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.seed, epoch)));
        p
    }

    /// `(record index, sample seed)` for each slot of the batch at `step`.
    pub fn slots(&self, n: usize, step: u64) -> Result<Vec<(usize, u64)>> {
        if n == 0 {
            return Err(Error::Config("dataset is empty".into()));
        }
        let b = self.batch_size as u64;
        let mut out = Vec::with_capacity(self.batch_size);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for i in 0..b {
            let g = step * b + i;
            let epoch = g / n as u64;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, self.permutation(n, epoch)));
            }
            let perm = &cached.as_ref().unwrap().1;
            out.push((perm[(g % n as u64) as usize], mix(self.seed ^ 0x6d61_736b, g)));
        }
        Ok(out)
    }

    pub fn samples(&self, dataset: &Dataset, step: u64) -> Result<Vec<MaskedSample>> {
        self.slots(dataset.len(), step)?
            .into_iter()
            .map(|(idx, seed)| dataset.sample(idx, seed))
            .collect()
    }
}

/// Tensors for one stage-2 step.
#[derive(Debug, Clone)]
pub struct JointBatch {
    pub x_q: Tensor,
    pub mask: Tensor,
    pub target: Tensor,
    /// Present only when every sample has a UV field.
    pub uv: Option<Vec<UvField>>,
}

impl JointBatch {
    pub fn from_samples(samples: &[MaskedSample], dtype: DType) -> Result<Self> {
        let dev = Device::Cpu;
        let xq: Vec<&ImageTensor> = samples.iter().map(|s| &s.x_q).collect();
        let targets: Vec<&ImageTensor> = samples.iter().map(|s| &s.target).collect();
        let masks: Vec<&Mask> = samples.iter().map(|s| &s.mask).collect();
        let uv = samples
            .iter()
            .map(|s| s.uv_gt.clone())
            .collect::<Option<Vec<_>>>();
        Ok(Self {
            x_q: ImageTensor::batch_tensor(&xq, dtype, &dev)?,
            mask: crate::generator::mask_batch(&masks, dtype)?,
            target: ImageTensor::batch_tensor(&targets, dtype, &dev)?,
            uv,
        })
    }

    pub fn uv_refs(&self) -> Option<Vec<&UvField>> {
        self.uv.as_ref().map(|v| v.iter().collect())
    }
}

/// Two masked views per sample for stage 1.
pub fn pair_batch(samples: &[MaskedSample], dtype: DType) -> Result<(Tensor, Tensor)> {
    let dev = Device::Cpu;
    let q: Vec<&ImageTensor> = samples.iter().map(|s| &s.x_q).collect();
    let k: Vec<&ImageTensor> = samples.iter().map(|s| &s.x_k).collect();
    Ok((
        ImageTensor::batch_tensor(&q, dtype, &dev)?,
        ImageTensor::batch_tensor(&k, dtype, &dev)?,
    ))
}
