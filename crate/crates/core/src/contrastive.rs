//! Stage-1 Siamese pretraining: query/key encoders, momentum update, FIFO
//! key queue and the InfoNCE objective.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::nn::{l2_normalize, Builder, Conv2d, Init, Linear, ParamStore};
use crate::optim::{Sgd, SgdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// Each stage halves the spatial size.
    pub num_stages: usize,
    pub embed_dim: usize,
    /// Channel cap for deep stages.
    #[serde(default = "default_max_width")]
    pub max_width: usize,
}

fn default_max_width() -> usize {
    256
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_width: 32,
            num_stages: 6,
            embed_dim: 128,
            max_width: default_max_width(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_stages == 0 || self.base_width == 0 || self.embed_dim == 0 {
            return Err(Error::Config(
                "encoder needs at least one stage, non-zero width and embedding size".into(),
            ));
        }
        Ok(())
    }

    /// Output channels of stage `i` (1-based).
    pub fn stage_width(&self, i: usize) -> usize {
        (self.base_width << (i - 1).min(16)).min(self.max_width.max(self.base_width))
    }

    pub fn divisor(&self) -> usize {
        1 << self.num_stages
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let d = self.divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by 2^{} = {d}",
                self.num_stages
            )));
        }
        Ok(())
    }
}

/// Strided convolutional stack; stage `i` maps to `H/2^i`.
#[derive(Debug, Clone)]
pub struct Trunk {
    stages: Vec<Conv2d>,
    config: EncoderConfig,
}

impl Trunk {
    pub fn new(b: &Builder, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(config.num_stages);
        let mut cin = config.in_channels;
        for i in 1..=config.num_stages {
            let cout = config.stage_width(i);
            stages.push(Conv2d::new(
                &b.pp(format!("s{i}")),
                cin,
                cout,
                3,
                2,
                Init::He(cin * 9),
                true,
            )?);
            cin = cout;
        }
        Ok(Self { stages, config })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Features after every stage, shallowest first.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "encoder expects {} channels, got {c}",
                self.config.in_channels
            )));
        }
        self.config.check_input(h, w)?;
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut cur = x.clone();
        for stage in &self.stages {
            cur = stage.forward(&cur)?.relu()?;
            feats.push(cur.clone());
        }
        Ok(feats)
    }
}

/// Trunk + global average pool + linear projection + L2 normalization.
#[derive(Debug, Clone)]
pub struct Encoder {
    trunk: Trunk,
    proj: Linear,
}

impl Encoder {
    pub fn new(b: &Builder, config: EncoderConfig) -> Result<Self> {
        let trunk = Trunk::new(&b.pp("trunk"), config)?;
        let proj = Linear::new(
            &b.pp("proj"),
            config.stage_width(config.num_stages),
            config.embed_dim,
        )?;
        Ok(Self { trunk, proj })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.trunk.config()
    }

    /// `[B, 3, H, W]` → unit-norm rows `[B, embed_dim]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let feats = self.trunk.forward(x)?;
        let deepest = feats.last().expect("at least one stage");
        let pooled = deepest.mean((2, 3))?;
        l2_normalize(&self.proj.forward(&pooled)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { temperature: 0.07 }
    }
}

const NORM_TOL: f64 = 1e-5;

/// Fixed-capacity FIFO of unit-norm key embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureQueue {
    capacity: usize,
    dim: usize,
    entries: Vec<f32>,
    head: usize,
    filled: usize,
}

impl FeatureQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config(
                "queue capacity and dimension must be positive".into(),
            ));
        }
        Ok(Self {
            capacity,
            dim,
            entries: vec![0.0; capacity * dim],
            head: 0,
            filled: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    /// Stored row at slot `i`.
    pub fn entry(&self, i: usize) -> &[f32] {
        &self.entries[i * self.dim..(i + 1) * self.dim]
    }

    /// Stored keys from oldest to newest.
    pub fn ordered(&self) -> Vec<&[f32]> {
        let start = if self.filled < self.capacity { 0 } else { self.head };
        (0..self.filled)
            .map(|j| self.entry((start + j) % self.capacity))
            .collect()
    }

    /// Writes `keys` (rows of length `dim`) at `head..head+B` modulo capacity.
    pub fn enqueue_rows(&mut self, keys: &[f32]) -> Result<()> {
        if keys.len() % self.dim != 0 {
            return Err(Error::Shape(format!(
                "key buffer of {} values is not a multiple of dim {}",
                keys.len(),
                self.dim
            )));
        }
        let batch = keys.len() / self.dim;
        if batch > self.capacity {
            return Err(Error::Capacity {
                batch,
                capacity: self.capacity,
            });
        }
        for (r, row) in keys.chunks_exact(self.dim).enumerate() {
            let norm = row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOL {
                return Err(Error::State(format!("key row {r} has norm {norm}, expected 1")));
            }
        }
        for row in keys.chunks_exact(self.dim) {
            let slot = self.head;
            self.entries[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(row);
            self.head = (self.head + 1) % self.capacity;
        }
        self.filled = (self.filled + batch).min(self.capacity);
        Ok(())
    }

    pub fn enqueue(&mut self, keys: &Tensor) -> Result<()> {
        let (_, d) = keys.dims2()?;
        if d != self.dim {
            return Err(Error::Shape(format!(
                "keys have dim {d}, queue holds {}",
                self.dim
            )));
        }
        let flat: Vec<f32> = keys.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        self.enqueue_rows(&flat)
    }

    /// The `filled` live entries as a `[filled, dim]` tensor (slot order).
    pub fn negatives(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        if self.filled == 0 {
            return Err(Error::State("feature queue is empty".into()));
        }
        let t = Tensor::from_slice(
            &self.entries[..self.filled * self.dim],
            (self.filled, self.dim),
            device,
        )?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn save_into(&self, archive: &mut Archive, prefix: &str) -> Result<()> {
        archive.put_f32(
            format!("{prefix}entries"),
            vec![self.capacity, self.dim],
            &self.entries,
        );
        archive.put_json(format!("{prefix}head"), &self.head)?;
        archive.put_json(format!("{prefix}filled"), &self.filled)?;
        Ok(())
    }

    pub fn load_from(archive: &Archive, prefix: &str) -> Result<Self> {
        let (shape, entries) = archive.get_f32(&format!("{prefix}entries"))?;
        if shape.len() != 2 {
            return Err(Error::Checkpoint("queue entries must be 2-D".into()));
        }
        let head: usize = archive.get_json(&format!("{prefix}head"))?;
        let filled: usize = archive.get_json(&format!("{prefix}filled"))?;
        if head >= shape[0] || filled > shape[0] {
            return Err(Error::Checkpoint("queue counters out of range".into()));
        }
        Ok(Self {
            capacity: shape[0],
            dim: shape[1],
            entries,
            head,
            filled,
        })
    }
}

/// Mean over the batch of `−log softmax([⟨q,k⁺⟩, ⟨q,n_1⟩, …] / τ)[0]`, with
/// negatives taken from the live queue entries only.
pub fn info_nce_loss(
    z_q: &Tensor,
    z_k_pos: &Tensor,
    queue: &FeatureQueue,
    temperature: f64,
) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let (b, d) = z_q.dims2()?;
    if z_k_pos.dims2()? != (b, d) || d != queue.dim() {
        return Err(Error::Shape(format!(
            "query {:?}, key {:?} and queue dim {} disagree",
            z_q.dims(),
            z_k_pos.dims(),
            queue.dim()
        )));
    }
    let negatives = queue.negatives(z_q.dtype(), z_q.device())?;
    let l_pos = (z_q * z_k_pos)?.sum_keepdim(1)?;
    let l_neg = z_q.matmul(&negatives.t()?)?;
    let logits = (Tensor::cat(&[&l_pos, &l_neg], 1)? / temperature)?;
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let lse = (logits.broadcast_sub(&max)?.exp()?.sum_keepdim(1)?.log()? + max)?;
    let pos = logits.narrow(1, 0, 1)?;
    Ok((lse - pos)?.mean_all()?)
}

/// `θ_k ← m·θ_k + (1 − m)·θ_q` for every parameter, in place on `key`.
pub fn momentum_update(key: &ParamStore, query: &ParamStore, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("momentum {m} outside [0, 1]")));
    }
    let (kv, qv) = (key.vars(), query.vars());
    if kv.len() != qv.len() {
        return Err(Error::Shape(format!(
            "key has {} parameters, query has {}",
            kv.len(),
            qv.len()
        )));
    }
    for ((kn, k), (qn, q)) in kv.iter().zip(&qv) {
        if kn != qn || k.dims() != q.dims() {
            return Err(Error::Shape(format!(
                "parameter mismatch: key `{kn}` {:?} vs query `{qn}` {:?}",
                k.dims(),
                q.dims()
            )));
        }
    }
    for ((_, k), (_, q)) in kv.iter().zip(&qv) {
        let updated = ((k.as_tensor() * m)? + (q.as_tensor() * (1.0 - m))?)?;
        k.set(&updated.detach())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub contrastive: ContrastiveConfig,
    pub momentum: f64,
    pub queue_capacity: usize,
    pub sgd: SgdConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            contrastive: ContrastiveConfig::default(),
            momentum: 0.9,
            queue_capacity: 4096,
            sgd: SgdConfig::default(),
        }
    }
}

/// Full stage-1 training state.
pub struct Pretrainer {
    pub config: PretrainConfig,
    query_params: ParamStore,
    key_params: ParamStore,
    query: Encoder,
    key: Encoder,
    pub queue: FeatureQueue,
    optimizer: Sgd,
    step: u64,
}

impl Pretrainer {
    pub fn new(config: PretrainConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.encoder.validate()?;
        if !(0.0..1.0).contains(&config.momentum) {
            return Err(Error::Config(format!(
                "momentum {} outside [0, 1)",
                config.momentum
            )));
        }
        if !(config.contrastive.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        let query_params = ParamStore::new(seed, dtype);
        let query = Encoder::new(&query_params.root(), config.encoder)?;
        // θ_k starts as an exact copy of θ_q.
        let key_params = query_params.deep_copy()?;
        let key = Encoder::new(&key_params.frozen_root(), config.encoder)?;
        Ok(Self {
            config,
            queue: FeatureQueue::new(config.queue_capacity, config.encoder.embed_dim)?,
            query_params,
            key_params,
            query,
            key,
            optimizer: Sgd::new(config.sgd),
            step: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn query_params(&self) -> &ParamStore {
        &self.query_params
    }

    pub fn key_params(&self) -> &ParamStore {
        &self.key_params
    }

    pub fn query_encoder(&self) -> &Encoder {
        &self.query
    }

    pub fn key_encoder(&self) -> &Encoder {
        &self.key
    }

    /// One update on a batch of views `[B, 3, H, W]`.
    ///
    /// Order: encode queries, encode keys without a tape, InfoNCE against the
    /// queue, SGD on θ_q, momentum update of θ_k, enqueue the keys. On the very
    /// first step the queue is empty, so the keys are enqueued before the loss.
    pub fn pretrain_step(&mut self, x_q: &Tensor, x_k: &Tensor) -> Result<f64> {
        let z_q = self.query.encode(x_q)?;
        let z_k = self.key.encode(x_k)?.detach();
        if self.queue.filled() == 0 {
            self.queue.enqueue(&z_k)?;
        }
        let loss = info_nce_loss(&z_q, &z_k, &self.queue, self.config.contrastive.temperature)?;
        let grads = loss.backward()?;
        self.optimizer.step(&self.query_params, &grads)?;
        momentum_update(&self.key_params, &self.query_params, self.config.momentum)?;
        if self.step > 0 {
            self.queue.enqueue(&z_k)?;
        }
        self.step += 1;
        Ok(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        self.query_params.save_into(&mut a, "query.")?;
        self.key_params.save_into(&mut a, "key.")?;
        self.queue.save_into(&mut a, "queue.")?;
        self.optimizer.save_into(&mut a, "opt.")?;
        a.put_json("pretrain.step", &self.step)?;
        a.put_json("pretrain.config", &self.config)?;
        a.put_json("pretrain.seed", &self.query_params.seed())?;
        Ok(a)
    }

    pub fn from_archive(archive: &Archive, dtype: DType) -> Result<Self> {
        let config: PretrainConfig = archive.get_json("pretrain.config")?;
        let seed: u64 = archive.get_json("pretrain.seed")?;
        let mut p = Self::new(config, seed, dtype)?;
        p.query_params.load_from(archive, "query.")?;
        p.key_params.load_from(archive, "key.")?;
        p.queue = FeatureQueue::load_from(archive, "queue.")?;
        p.optimizer.load_from(archive, "opt.", &p.query_params)?;
        p.step = archive.get_json("pretrain.step")?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f32]) -> Vec<f32> {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn two_dim_example() {
        let dev = Device::Cpu;
        let q = Tensor::new(&[[1f64, 0.0]], &dev).unwrap();
        let mut queue = FeatureQueue::new(4, 2).unwrap();
        queue.enqueue_rows(&[0.0, 1.0]).unwrap();
        let loss = info_nce_loss(&q, &q, &queue, 0.07)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let a = (1.0f64 / 0.07).exp();
        let expect = -(a / (a + 1.0)).ln();
        assert!((loss - expect).abs() < 1e-12);
        assert!((loss - 6.24875e-7).abs() < 1e-11, "{loss}");
    }

    #[test]
    fn uniform_logits_give_log_n_plus_one() {
        let dev = Device::Cpu;
        let k = unit(&[0.3, -0.4, 0.5]);
        let mut queue = FeatureQueue::new(8, 3).unwrap();
        for _ in 0..5 {
            queue.enqueue_rows(&k).unwrap();
        }
        let q = Tensor::from_slice(&unit(&[1.0, 2.0, 3.0]), (1, 3), &dev).unwrap();
        let kt = Tensor::from_slice(&k, (1, 3), &dev).unwrap();
        let loss = info_nce_loss(&q, &kt, &queue, 0.5)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!((loss - 6f32.ln()).abs() < 1e-5);
    }

    #[test]
    fn config_and_state_errors() {
        let dev = Device::Cpu;
        let q = Tensor::new(&[[1f32, 0.0]], &dev).unwrap();
        let empty = FeatureQueue::new(2, 2).unwrap();
        assert!(matches!(
            info_nce_loss(&q, &q, &empty, 0.07),
            Err(Error::State(_))
        ));
        let mut queue = empty.clone();
        queue.enqueue_rows(&[0.0, 1.0]).unwrap();
        assert!(matches!(
            info_nce_loss(&q, &q, &queue, 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            info_nce_loss(&q, &q, &queue, -1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn queue_bookkeeping() {
        let mut q = FeatureQueue::new(4, 1).unwrap();
        q.enqueue_rows(&[1.0, 1.0]).unwrap();
        assert_eq!((q.filled(), q.head()), (2, 2));
        q.enqueue_rows(&[-1.0, -1.0]).unwrap();
        assert_eq!((q.filled(), q.head()), (4, 0));
        assert!(matches!(
            q.enqueue_rows(&[1.0; 5]),
            Err(Error::Capacity {
                batch: 5,
                capacity: 4
            })
        ));
        assert!(matches!(q.enqueue_rows(&[0.5]), Err(Error::State(_))));
    }

    #[test]
    fn full_queue_replaces_oldest() {
        let mut q = FeatureQueue::new(4, 2).unwrap();
        let keys: Vec<Vec<f32>> = (0..5)
            .map(|i| {
                let a = i as f32 * 0.3;
                vec![a.cos(), a.sin()]
            })
            .collect();
        for k in &keys[..4] {
            q.enqueue_rows(k).unwrap();
        }
        q.enqueue_rows(&keys[4]).unwrap();
        let ordered: Vec<Vec<f32>> = q.ordered().into_iter().map(|r| r.to_vec()).collect();
        assert_eq!(ordered, keys[1..].to_vec());
        assert_eq!(q.entry(0), keys[4].as_slice());
    }

    #[test]
    fn momentum_scalar_cases() {
        let q = ParamStore::new(0, DType::F64);
        q.root().get("w", &[1], Init::Const(1.0)).unwrap();
        for (m, expect) in [(0.9, 1.9), (1.0, 2.0), (0.0, 1.0)] {
            let k = ParamStore::new(0, DType::F64);
            k.root().get("w", &[1], Init::Const(2.0)).unwrap();
            momentum_update(&k, &q, m).unwrap();
            let got = k.get("w").unwrap().to_vec1::<f64>().unwrap()[0];
            assert!((got - expect).abs() < 1e-12, "m={m}: {got}");
        }
        let bad = ParamStore::new(0, DType::F64);
        bad.root().get("w", &[2], Init::Zeros).unwrap();
        assert!(matches!(momentum_update(&bad, &q, 0.9), Err(Error::Shape(_))));
    }

    #[test]
    fn encoder_rows_are_unit_and_deterministic() {
        let cfg = EncoderConfig {
            base_width: 4,
            num_stages: 3,
            embed_dim: 8,
            ..Default::default()
        };
        let store = ParamStore::new(1, DType::F32);
        let enc = Encoder::new(&store.root(), cfg).unwrap();
        let one = Tensor::randn(0f32, 1.0, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let other = Tensor::randn(0f32, 1.0, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let x = Tensor::cat(&[&one, &other, &one], 0).unwrap();
        let z = enc.encode(&x).unwrap().to_vec2::<f32>().unwrap();
        for row in &z {
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        assert_eq!(z[0], z[2]);
        let bad = Tensor::zeros((1, 3, 12, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.encode(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn pretrain_step_isolates_key_gradients() {
        let cfg = PretrainConfig {
            encoder: EncoderConfig {
                base_width: 4,
                num_stages: 2,
                embed_dim: 8,
                ..Default::default()
            },
            queue_capacity: 16,
            ..Default::default()
        };
        let mut p = Pretrainer::new(cfg, 3, DType::F64).unwrap();
        let dev = Device::Cpu;
        let xq = Tensor::rand(0f64, 1.0, (2, 3, 8, 8), &dev).unwrap();
        let xk = Tensor::rand(0f64, 1.0, (2, 3, 8, 8), &dev).unwrap();
        p.pretrain_step(&xq, &xk).unwrap();
        for _ in 0..3 {
            let k_before = p.key_params().deep_copy().unwrap();
            p.pretrain_step(&xq, &xk).unwrap();
            let q_after = p.query_params();
            for (name, k) in p.key_params().vars() {
                let expect = ((k_before.get(&name).unwrap().as_tensor() * 0.9).unwrap()
                    + (q_after.get(&name).unwrap().as_tensor() * 0.1).unwrap())
                .unwrap();
                let diff = (k.as_tensor() - &expect)
                    .unwrap()
                    .abs()
                    .unwrap()
                    .max_all()
                    .unwrap()
                    .to_scalar::<f64>()
                    .unwrap();
                assert!(diff < 1e-12, "{name}: {diff}");
            }
        }
        assert_eq!(p.queue.filled(), 8);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = PretrainConfig {
            encoder: EncoderConfig {
                base_width: 4,
                num_stages: 2,
                embed_dim: 4,
                ..Default::default()
            },
            queue_capacity: 8,
            ..Default::default()
        };
        let mut p = Pretrainer::new(cfg, 9, DType::F32).unwrap();
        let x = Tensor::rand(0f32, 1.0, (2, 3, 8, 8), &Device::Cpu).unwrap();
        p.pretrain_step(&x, &x).unwrap();
        p.pretrain_step(&x, &x).unwrap();
        let bytes = p.to_archive().unwrap().to_bytes();
        let back =
            Pretrainer::from_archive(&Archive::read_from(bytes.as_slice()).unwrap(), DType::F32).unwrap();
        assert_eq!(back.to_archive().unwrap().to_bytes(), bytes);
        assert_eq!(back.queue, p.queue);
    }
}
