//! Plain-Rust conversions between flat buffers and library types. Kept free
//! of Python so they can be tested without an interpreter.

use candle_core::{DType, Device};
use facefill::data::generate_synthetic_face;
use facefill::generator::mask_batch;
use facefill::metrics::GaussianStats;
use facefill::trainer::TrainedGenerator;
use facefill::{Error, ImageTensor, Mask, Result};
use nalgebra::{DMatrix, DVector};

pub fn image(data: Vec<f32>, channels: usize, height: usize, width: usize) -> Result<ImageTensor> {
    ImageTensor::new(channels, height, width, data)
}

pub fn mask(bits: Vec<u8>, height: usize, width: usize) -> Result<Mask> {
    Mask::new(height, width, bits)
}

/// Rows of equal length flattened row-major.
pub fn flatten_rows(rows: &[Vec<f64>]) -> Result<(usize, usize, Vec<f64>)> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("rows differ in length".into()));
    }
    Ok((rows.len(), d, rows.concat()))
}

pub fn gaussian(mean: Vec<f64>, cov: &[Vec<f64>]) -> Result<GaussianStats> {
    let (r, c, flat) = flatten_rows(cov)?;
    if r != c {
        return Err(Error::Shape(format!("covariance is {r}x{c}")));
    }
    GaussianStats::new(DVector::from_vec(mean), DMatrix::from_row_slice(r, c, &flat), 0)
}

/// Completes one `[3, h, w]` image given its hole mask; returns the clamped
/// full-resolution prediction, flattened.
pub fn complete(model: &TrainedGenerator, img: &ImageTensor, m: &Mask) -> Result<Vec<f32>> {
    if (m.height(), m.width()) != (img.height(), img.width()) {
        return Err(Error::Shape("mask and image sizes differ".into()));
    }
    let dtype = model.params.dtype();
    let x = img.occlude(m)?.to_tensor(dtype, &Device::Cpu)?;
    let out = model.generate(&x, &mask_batch(&[m], dtype)?)?;
    let y = out.final_image()?.to_dtype(DType::F32)?;
    Ok(y.flatten_all()?.to_vec1()?)
}

pub struct SyntheticFace {
    pub image: Vec<f32>,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    pub validity: Vec<u8>,
}

pub fn synthetic_face(seed: u64, height: usize, width: usize) -> Result<SyntheticFace> {
    let (img, uv) = generate_synthetic_face(seed, height, width)?;
    Ok(SyntheticFace {
        image: img.into_data(),
        u: uv.u().to_vec(),
        v: uv.v().to_vec(),
        validity: uv.validity().to_vec(),
    })
}
