//! Python bindings. Images cross the boundary as flat row-major float lists
//! in `[C, H, W]` order; masks as flat 0/1 lists with 1 on missing pixels.

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use facefill::archive::Archive;
use facefill::contrastive;
use facefill::data::Dataset;
use facefill::metrics::{self, SsimConfig};
use facefill::trainer::{self, resolve_pretrain, run_joint, run_pretrain, LogRecord};
use facefill::Error;

pub mod convert;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Ingestion { .. } | Error::Checkpoint(_) => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Shape(_) | Error::Capacity { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for facefill::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Run configuration, edited through TOML text and dotted overrides.
#[pyclass(name = "RunConfig", module = "facefill_py", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: trainer::RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => trainer::RunConfig::from_toml_str(t).py()?,
            None => trainer::RunConfig::default(),
        };
        Ok(Self { inner })
    }

    /// New config with `key=value` overrides applied.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.with_overrides(&overrides).py()?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().py()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().py()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn steps(&self) -> u64 {
        self.inner.steps
    }

    #[getter]
    fn batch_size(&self) -> usize {
        self.inner.batch_size
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(stage={:?}, seed={}, steps={}, batch_size={})",
            self.inner.stage, self.inner.seed, self.inner.steps, self.inner.batch_size
        )
    }
}

/// FIFO of unit-norm key embeddings.
#[pyclass(name = "FeatureQueue", module = "facefill_py")]
struct PyFeatureQueue {
    inner: contrastive::FeatureQueue,
}

#[pymethods]
impl PyFeatureQueue {
    #[new]
    fn new(capacity: usize, dim: usize) -> PyResult<Self> {
        Ok(Self {
            inner: contrastive::FeatureQueue::new(capacity, dim).py()?,
        })
    }

    fn enqueue(&mut self, rows: Vec<Vec<f32>>) -> PyResult<()> {
        if rows.iter().any(|r| r.len() != self.inner.dim()) {
            return Err(PyValueError::new_err("every row must have the queue dimension"));
        }
        self.inner.enqueue_rows(&rows.concat()).py()
    }

    /// Stored keys, oldest first.
    fn ordered(&self) -> Vec<Vec<f32>> {
        self.inner.ordered().into_iter().map(<[f32]>::to_vec).collect()
    }

    #[getter]
    fn head(&self) -> usize {
        self.inner.head()
    }

    #[getter]
    fn filled(&self) -> usize {
        self.inner.filled()
    }

    #[getter]
    fn capacity(&self) -> usize {
        self.inner.capacity()
    }

    fn __len__(&self) -> usize {
        self.inner.filled()
    }
}

/// Trained stage-2 generator loaded from a checkpoint.
#[pyclass(name = "Generator", module = "facefill_py")]
struct PyGenerator {
    inner: trainer::TrainedGenerator,
}

#[pymethods]
impl PyGenerator {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let archive = Archive::load(&path).py()?;
        Ok(Self {
            inner: trainer::TrainedGenerator::from_archive(&archive).py()?,
        })
    }

    /// Fresh, untrained generator for a configuration.
    #[staticmethod]
    fn untrained(config: &PyRunConfig) -> PyResult<Self> {
        let c = &config.inner;
        Ok(Self {
            inner: trainer::TrainedGenerator::new(c.generator_config(), c.seed, c.dtype()).py()?,
        })
    }

    /// Completes a `[3, height, width]` image; returns the prediction.
    fn complete(&self, image: Vec<f32>, mask: Vec<u8>, height: usize, width: usize) -> PyResult<Vec<f32>> {
        let img = convert::image(image, 3, height, width).py()?;
        let m = convert::mask(mask, height, width).py()?;
        convert::complete(&self.inner, &img, &m).py()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params.num_elements()
    }

    #[getter]
    fn use_daf(&self) -> bool {
        self.inner.config.use_daf
    }

    #[getter]
    fn use_uv(&self) -> bool {
        self.inner.config.use_uv
    }
}

fn rows_tensor(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    let (n, d, flat) = convert::flatten_rows(rows).py()?;
    Tensor::from_vec(flat, (n, d), &Device::Cpu).map_err(|e| py_err(e.into()))
}

/// Mean InfoNCE over the batch against the queue's live entries.
#[pyfunction]
fn info_nce_loss(
    z_q: Vec<Vec<f64>>,
    z_k: Vec<Vec<f64>>,
    queue: &PyFeatureQueue,
    temperature: f64,
) -> PyResult<f64> {
    let loss = contrastive::info_nce_loss(
        &rows_tensor(&z_q)?,
        &rows_tensor(&z_k)?,
        &queue.inner,
        temperature,
    )
    .py()?;
    loss.to_dtype(DType::F64)
        .and_then(|t| t.to_scalar::<f64>())
        .map_err(|e| py_err(e.into()))
}

#[pyfunction]
#[pyo3(signature = (a, b, channels, height, width, peak=1.0))]
fn psnr(a: Vec<f32>, b: Vec<f32>, channels: usize, height: usize, width: usize, peak: f64) -> PyResult<f64> {
    let a = convert::image(a, channels, height, width).py()?;
    let b = convert::image(b, channels, height, width).py()?;
    metrics::psnr(&a, &b, peak).py()
}

/// SSIM with the 11-tap Gaussian window.
#[pyfunction]
fn ssim(a: Vec<f32>, b: Vec<f32>, channels: usize, height: usize, width: usize) -> PyResult<f64> {
    let a = convert::image(a, channels, height, width).py()?;
    let b = convert::image(b, channels, height, width).py()?;
    metrics::ssim(&a, &b, &SsimConfig::default()).py()
}

#[pyfunction]
fn frechet_distance(
    mean1: Vec<f64>,
    cov1: Vec<Vec<f64>>,
    mean2: Vec<f64>,
    cov2: Vec<Vec<f64>>,
) -> PyResult<f64> {
    let s1 = convert::gaussian(mean1, &cov1).py()?;
    let s2 = convert::gaussian(mean2, &cov2).py()?;
    metrics::frechet_distance(&s1, &s2).py()
}

/// `(auc, tpr_at_1pct, tpr_at_0p1pct)` from scores and genuine-pair labels.
#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<(f64, f64, f64)> {
    let r = metrics::roc_from_scores(&scores, &labels).py()?;
    Ok((r.auc, r.tpr_at_1pct, r.tpr_at_0p1pct))
}

/// `(image, u, v, validity)` flat lists for one rendered face.
#[pyfunction]
fn synthetic_face(
    seed: u64,
    height: usize,
    width: usize,
) -> PyResult<(Vec<f32>, Vec<f32>, Vec<f32>, Vec<u8>)> {
    let f = convert::synthetic_face(seed, height, width).py()?;
    Ok((f.image, f.u, f.v, f.validity))
}

/// Writes `<out>/<split>/images` and `uv`.
#[pyfunction]
#[pyo3(signature = (count, height, width, seed, out, split="train"))]
fn gen_synthetic(
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
    out: PathBuf,
    split: &str,
) -> PyResult<()> {
    Dataset::synthetic(count, height, width, seed)
        .and_then(|d| d.write(&out, split))
        .py()
}

type LogRow = (u64, f64, f64, f64, f64, f64);

fn log_rows(records: &[LogRecord]) -> Vec<LogRow> {
    records
        .iter()
        .map(|r| (r.step, r.total, r.l_rec, r.l_uv, r.l_style, r.l_ip))
        .collect()
}

/// Stage 1; returns `(step, total, rec, uv, style, ip)` rows (InfoNCE in
/// `total`). Checkpoints go to the config's `out_dir` when set.
#[pyfunction]
fn pretrain(py: Python<'_>, config: &PyRunConfig) -> PyResult<Vec<LogRow>> {
    let mut c = config.inner.clone();
    c.stage = trainer::Stage::Pretrain;
    py.detach(|| {
        let data = c.data.load()?;
        run_pretrain(&c, &data, None).map(|o| log_rows(o.log.records()))
    })
    .py()
}

/// Stage 2, honouring the config's `pretrain_checkpoint`.
#[pyfunction]
fn train(py: Python<'_>, config: &PyRunConfig) -> PyResult<Vec<LogRow>> {
    let mut c = config.inner.clone();
    c.stage = trainer::Stage::Joint;
    py.detach(|| {
        let pre = resolve_pretrain(&c)?;
        let data = c.data.load()?;
        run_joint(&c, &data, pre.as_ref(), None).map(|o| log_rows(o.log.records()))
    })
    .py()
}

/// Runs the desk-scale experiment; returns the report as JSON text.
#[pyfunction]
fn run_smoke(py: Python<'_>, seed: u64) -> PyResult<String> {
    let report = py.detach(|| trainer::run_smoke_experiment(seed)).py()?;
    serde_json::to_string(&report).map_err(|e| py_err(e.into()))
}

#[pymodule]
fn facefill_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    trainer::apply_deterministic_env();
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyFeatureQueue>()?;
    m.add_class::<PyGenerator>()?;
    m.add_function(wrap_pyfunction!(info_nce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_face, m)?)?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_smoke, m)?)?;
    Ok(())
}
