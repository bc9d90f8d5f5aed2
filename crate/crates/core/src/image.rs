//! Dense image carrier shared by every stage of the pipeline.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// A `[channels, height, width]` image stored row-major with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "image buffer of {} values does not match [{channels}, {height}, {width}]",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f32) {
        self.data[(c * self.height + y) * self.width + x] = value;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn clamp01(&self) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }

    /// Returns `self ⊙ (1 − mask)`; the mask broadcasts over channels.
    pub fn occlude(&self, mask: &Mask) -> Result<Self> {
        if mask.height() != self.height || mask.width() != self.width {
            return Err(Error::Shape(format!(
                "mask {}x{} does not match image {}x{}",
                mask.height(),
                mask.width(),
                self.height,
                self.width
            )));
        }
        let n = self.height * self.width;
        let mut out = self.clone();
        for c in 0..self.channels {
            for (v, &m) in out.data[c * n..(c + 1) * n].iter_mut().zip(mask.bits()) {
                if m != 0 {
                    *v = 0.0;
                }
            }
        }
        Ok(out)
    }

    /// `[1, C, H, W]` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, self.channels, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Stacks images of identical shape into a `[B, C, H, W]` tensor.
    pub fn batch_tensor(images: &[&ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("cannot batch zero images".into()))?;
        let dims = first.dims();
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if img.dims() != dims {
                return Err(Error::Shape(format!(
                    "batch mixes image shapes {:?} and {:?}",
                    dims,
                    img.dims()
                )));
            }
            data.extend_from_slice(&img.data);
        }
        let t = Tensor::from_vec(data, (images.len(), dims.0, dims.1, dims.2), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Splits a `[B, C, H, W]` tensor back into images.
    pub fn from_batch_tensor(t: &Tensor) -> Result<Vec<ImageTensor>> {
        let (b, c, h, w) = t.dims4()?;
        let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let n = c * h * w;
        Ok((0..b)
            .map(|i| ImageTensor {
                channels: c,
                height: h,
                width: w,
                data: flat[i * n..(i + 1) * n].to_vec(),
            })
            .collect())
    }

    /// Loads an 8-bit image as RGB, dividing by 255.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::ingestion(path, e))?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut out = Self::zeros(3, h, w);
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px.0[c] as f32 / 255.0);
            }
        }
        Ok(out)
    }

    /// Writes RGB (3 channels) or grayscale (1 channel) 8-bit PNG after clamping.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let quant = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let res = match self.channels {
            1 => image::GrayImage::from_fn(w, h, |x, y| {
                image::Luma([quant(self.get(0, y as usize, x as usize))])
            })
            .save(path),
            3 => image::RgbImage::from_fn(w, h, |x, y| {
                let (x, y) = (x as usize, y as usize);
                image::Rgb([
                    quant(self.get(0, y, x)),
                    quant(self.get(1, y, x)),
                    quant(self.get(2, y, x)),
                ])
            })
            .save(path),
            c => return Err(Error::Shape(format!("cannot encode a {c}-channel image as PNG"))),
        };
        res.map_err(|e| Error::ingestion(path, e))
    }

    /// Channel-wise mean over area blocks of `factor × factor` pixels.
    pub fn area_downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Shape(format!(
                "{}x{} is not divisible by downsampling factor {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Self::zeros(self.channels, h, w);
        let norm = (factor * factor) as f32;
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0f32;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += self.get(c, y * factor + dy, x * factor + dx);
                        }
                    }
                    out.set(c, y, x, acc / norm);
                }
            }
        }
        Ok(out)
    }
}

/// Binary occlusion mask; `1` marks a missing pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "mask buffer of {} values does not match {height}x{width}",
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Shape("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub(crate) fn bits_mut(&mut self) -> &mut [u8] {
        &mut self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / (self.height * self.width) as f64
    }

    /// Single-channel float view.
    pub fn to_image(&self) -> ImageTensor {
        ImageTensor {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.bits.iter().map(|&b| b as f32).collect(),
        }
    }

    /// Loads a grayscale PNG; pixels above mid-gray are treated as masked.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::ingestion(path, e))?;
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        let bits = gray.pixels().map(|p| (p.0[0] > 127) as u8).collect();
        Self::new(h as usize, w as usize, bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn occlude_zeroes_only_masked_pixels() {
        let img = ImageTensor::filled(3, 4, 4, 0.7);
        let mut mask = Mask::empty(4, 4);
        mask.bits_mut()[5] = 1;
        let out = img.occlude(&mask).unwrap();
        assert_eq!(out.get(1, 1, 1), 0.0);
        assert_eq!(out.get(2, 0, 0), 0.7);
        assert_eq!(out.data().iter().filter(|&&v| v == 0.0).count(), 3);
    }

    #[test]
    fn area_downsample_of_checkerboard_is_half() {
        let mut img = ImageTensor::zeros(1, 4, 4);
        for y in 0..4 {
            for x in 0..4 {
                img.set(0, y, x, ((x + y) % 2) as f32);
            }
        }
        let down = img.area_downsample(2).unwrap();
        assert!(down.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn batch_round_trip() {
        let a = ImageTensor::filled(3, 2, 2, 0.25);
        let b = ImageTensor::filled(3, 2, 2, 0.5);
        let t = ImageTensor::batch_tensor(&[&a, &b], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 3, 2, 2]);
        let back = ImageTensor::from_batch_tensor(&t).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn png_round_trip_quantizes_to_255ths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let mut img = ImageTensor::zeros(3, 3, 5);
        img.set(0, 1, 2, 128.0 / 255.0);
        img.set(2, 2, 4, 1.0);
        img.save_png(&path).unwrap();
        assert_eq!(ImageTensor::load_png(&path).unwrap(), img);
    }
}
