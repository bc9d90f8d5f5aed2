//! Named, seeded parameter storage and the handful of layers the models use.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::util::{fnv1a, mix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    /// He-normal for a ReLU layer with this fan-in.
    He(usize),
    /// `[c, c, 1, 1]` identity kernel.
    Identity,
}

/// A shared, name-ordered collection of trainable variables.
///
/// Initial values depend only on `(seed, name)`, so adding or removing one
/// parameter never perturbs the initialization of another.
#[derive(Clone)]
pub struct ParamStore {
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("seed", &self.seed)
            .field("dtype", &self.dtype)
            .field("params", &self.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: Arc::new(Mutex::new(BTreeMap::new())),
            seed,
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.vars.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.lock().unwrap().keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.lock().unwrap().get(name).cloned()
    }

    /// Snapshot of `(name, var)` pairs in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.lock().unwrap().values().map(|v| v.elem_count()).sum()
    }

    pub fn root(&self) -> Builder {
        Builder {
            store: self.clone(),
            prefix: String::new(),
            frozen: false,
        }
    }

    /// A builder whose tensors carry no gradient tape but share storage with
    /// the variables, so in-place updates stay visible.
    pub fn frozen_root(&self) -> Builder {
        Builder {
            frozen: true,
            ..self.root()
        }
    }

    fn get_or_init(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let mut vars = self.vars.lock().unwrap();
        if let Some(v) = vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter `{name}` has shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.clone());
        }
        let values = init_values(mix(self.seed, fnv1a(name.as_bytes())), shape, init)?;
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// Independent deep copy with identical names and values.
    pub fn deep_copy(&self) -> Result<ParamStore> {
        let copy = ParamStore {
            vars: Arc::new(Mutex::new(BTreeMap::new())),
            ..self.clone()
        };
        {
            let mut dst = copy.vars.lock().unwrap();
            for (name, v) in self.vars() {
                dst.insert(name, Var::from_tensor(&v.as_tensor().copy()?)?);
            }
        }
        Ok(copy)
    }

    /// Overwrites an existing parameter in place.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("no parameter named `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, archive holds {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn save_into(&self, archive: &mut Archive, prefix: &str) -> Result<()> {
        for (name, v) in self.vars() {
            archive.put_tensor(format!("{prefix}{name}"), v.as_tensor())?;
        }
        Ok(())
    }

    /// Loads every parameter of this store from `archive` under `prefix`.
    pub fn load_from(&self, archive: &Archive, prefix: &str) -> Result<()> {
        for (name, _) in self.vars() {
            let t = archive.get_tensor(&format!("{prefix}{name}"), self.dtype, &self.device)?;
            self.assign(&name, &t)?;
        }
        Ok(())
    }

    /// Bitwise equality of every parameter, as raw little-endian bytes.
    pub fn fingerprint(&self) -> Result<Vec<u8>> {
        let mut a = Archive::new();
        self.save_into(&mut a, "")?;
        Ok(a.to_bytes())
    }
}

fn init_values(seed: u64, shape: &[usize], init: Init) -> Result<Vec<f64>> {
    let n: usize = shape.iter().product();
    Ok(match init {
        Init::Zeros => vec![0.0; n],
        Init::Const(c) => vec![c; n],
        Init::Normal(_) | Init::He(_) => {
            let std = match init {
                Init::He(fan_in) => (2.0 / fan_in.max(1) as f64).sqrt(),
                Init::Normal(std) => std,
                _ => unreachable!(),
            };
            let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        }
        Init::Identity => {
            if shape.len() != 4 || shape[0] != shape[1] || shape[2] != 1 || shape[3] != 1 {
                return Err(Error::Shape(format!(
                    "identity init needs a [c, c, 1, 1] kernel, got {shape:?}"
                )));
            }
            let c = shape[0];
            (0..n).map(|i| if i / c == i % c { 1.0 } else { 0.0 }).collect()
        }
    })
}

/// Hierarchical view into a [`ParamStore`].
#[derive(Clone)]
pub struct Builder {
    store: ParamStore,
    prefix: String,
    frozen: bool,
}

impl Builder {
    pub fn pp(&self, segment: impl AsRef<str>) -> Builder {
        let prefix = if self.prefix.is_empty() {
            segment.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, segment.as_ref())
        };
        Builder {
            prefix,
            ..self.clone()
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let var = self.store.get_or_init(&full, shape, init)?;
        Ok(if self.frozen {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        })
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        b: &Builder,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        weight_init: Init,
        bias: bool,
    ) -> Result<Self> {
        Self::with_bias(
            b,
            cin,
            cout,
            kernel,
            stride,
            weight_init,
            bias.then_some(Init::Zeros),
        )
    }

    pub fn with_bias(
        b: &Builder,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        weight_init: Init,
        bias_init: Option<Init>,
    ) -> Result<Self> {
        let weight = b.get("weight", &[cout, cin, kernel, kernel], weight_init)?;
        let bias = match bias_init {
            Some(init) => Some(b.get("bias", &[cout], init)?),
            None => None,
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    /// 3×3, stride 1, He init, with bias.
    pub fn same3(b: &Builder, cin: usize, cout: usize) -> Result<Self> {
        Self::new(b, cin, cout, 3, 1, Init::He(cin * 9), true)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dims()[0], 1, 1))?)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(b: &Builder, din: usize, dout: usize) -> Result<Self> {
        Ok(Self {
            weight: b.get("weight", &[dout, din], Init::Normal((1.0 / din as f64).sqrt()))?,
            bias: b.get("bias", &[dout], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Area-average downsampling by an integer factor (identity for 1).
pub fn area_downsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!(
            "{h}x{w} is not divisible by downsampling factor {factor}"
        )));
    }
    Ok(x.avg_pool2d(factor)?)
}

/// Nearest-neighbour upsampling by an integer factor.
///
/// Built from broadcast and reshape rather than `upsample_nearest2d`, whose
/// backward pass in candle 0.11 overwrites instead of accumulating the
/// input gradient, dropping every other consumer's contribution.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::Shape("upsampling factor must be positive".into()));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, factor, w, factor))?
        .contiguous()?
        .reshape((b, c, h * factor, w * factor))?)
}

/// Row-wise L2 normalization of a `[B, d]` tensor.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(1)?.sqrt()?;
    Ok(x.broadcast_div(&norm.clamp(1e-12, f64::INFINITY)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_gradient_accumulates() {
        let x = Var::new(&[[[[1f64, 2.0], [3.0, 4.0]]]], &Device::Cpu).unwrap();
        let up = upsample_nearest(x.as_tensor(), 2).unwrap();
        assert_eq!(up.dims(), &[1, 1, 4, 4]);
        assert_eq!(
            up.flatten_all().unwrap().to_vec1::<f64>().unwrap()[..4],
            [1.0, 1.0, 2.0, 2.0]
        );
        // Upsample consumed first, a second use added afterwards.
        let loss = (up.sum_all().unwrap() + x.as_tensor().sum_all().unwrap()).unwrap();
        let g = loss.backward().unwrap();
        let g = g
            .get(x.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert_eq!(g, vec![5.0; 4]);
    }

    #[test]
    fn init_depends_only_on_seed_and_name() {
        let a = ParamStore::new(5, DType::F32);
        let b = ParamStore::new(5, DType::F32);
        a.root().get("x", &[3, 4], Init::Normal(1.0)).unwrap();
        b.root().get("other", &[2], Init::Normal(1.0)).unwrap();
        b.root().get("x", &[3, 4], Init::Normal(1.0)).unwrap();
        let va: Vec<f32> = a.get("x").unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f32> = b.get("x").unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn shape_conflict_is_error() {
        let s = ParamStore::new(0, DType::F32);
        s.root().get("w", &[2, 2], Init::Zeros).unwrap();
        assert!(s.root().get("w", &[3], Init::Zeros).is_err());
    }

    #[test]
    fn frozen_view_tracks_in_place_updates() {
        let s = ParamStore::new(0, DType::F32);
        let live = s.root().get("w", &[2], Init::Zeros).unwrap();
        let frozen = s.frozen_root().get("w", &[2], Init::Zeros).unwrap();
        assert!(live.is_variable());
        assert!(!frozen.is_variable());
        s.assign("w", &Tensor::new(&[1f32, 2.0], &Device::Cpu).unwrap())
            .unwrap();
        assert_eq!(frozen.to_vec1::<f32>().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn identity_kernel() {
        let v = init_values(0, &[2, 2, 1, 1], Init::Identity).unwrap();
        assert_eq!(v, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn normalize_rows() {
        let x = Tensor::new(&[[3f32, 4.0], [0.0, 2.0]], &Device::Cpu).unwrap();
        let y = l2_normalize(&x).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(y, vec![vec![0.6, 0.8], vec![0.0, 1.0]]);
    }
}
