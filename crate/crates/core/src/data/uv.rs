//! Dense UV correspondence fields and their `UVF1` file encoding.
//!
//! Layout (little-endian): magic `b"UVF1"`, `u32` height, `u32` width, then
//! `H·W` `f32` u values row-major, `H·W` `f32` v values, `H·W` `u8` validity.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const UVF_MAGIC: &[u8; 4] = b"UVF1";

#[derive(Debug, Clone, PartialEq)]
pub struct UvField {
    height: usize,
    width: usize,
    u: Vec<f32>,
    v: Vec<f32>,
    validity: Vec<u8>,
}

impl UvField {
    /// Builds a field, zeroing u and v outside the valid region.
    pub fn new(
        height: usize,
        width: usize,
        mut u: Vec<f32>,
        mut v: Vec<f32>,
        validity: Vec<u8>,
    ) -> Result<Self> {
        let n = height * width;
        if u.len() != n || v.len() != n || validity.len() != n {
            return Err(Error::Shape(format!(
                "uv buffers ({}, {}, {}) do not match {height}x{width}",
                u.len(),
                v.len(),
                validity.len()
            )));
        }
        for i in 0..n {
            match validity[i] {
                0 => {
                    u[i] = 0.0;
                    v[i] = 0.0;
                }
                1 => {
                    if !(0.0..=1.0).contains(&u[i]) || !(0.0..=1.0).contains(&v[i]) {
                        return Err(Error::Shape(format!(
                            "uv value ({}, {}) outside [0, 1] at valid pixel {i}",
                            u[i], v[i]
                        )));
                    }
                }
                other => return Err(Error::Shape(format!("validity value {other} is not binary"))),
            }
        }
        Ok(Self {
            height,
            width,
            u,
            v,
            validity,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn u(&self) -> &[f32] {
        &self.u
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    pub fn validity(&self) -> &[u8] {
        &self.validity
    }

    pub fn valid_count(&self) -> usize {
        self.validity.iter().map(|&b| b as usize).sum()
    }

    /// `[2, H, W]` image holding u then v.
    pub fn uv_image(&self) -> ImageTensor {
        let mut data = self.u.clone();
        data.extend_from_slice(&self.v);
        ImageTensor::new(2, self.height, self.width, data).expect("sizes checked at construction")
    }

    pub fn validity_image(&self) -> ImageTensor {
        let data = self.validity.iter().map(|&b| b as f32).collect();
        ImageTensor::new(1, self.height, self.width, data).expect("sizes checked at construction")
    }

    /// Area downsampling by `factor`. A coarse pixel is valid only when every
    /// fine pixel under it is valid, in which case u and v are block means.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 1 {
            return Ok(self.clone());
        }
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Shape(format!(
                "{}x{} uv field is not divisible by {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut u = vec![0.0; h * w];
        let mut v = vec![0.0; h * w];
        let mut validity = vec![0u8; h * w];
        let norm = (factor * factor) as f32;
        for y in 0..h {
            for x in 0..w {
                let (mut su, mut sv, mut all_valid) = (0.0f32, 0.0f32, true);
                for dy in 0..factor {
                    for dx in 0..factor {
                        let i = (y * factor + dy) * self.width + x * factor + dx;
                        su += self.u[i];
                        sv += self.v[i];
                        all_valid &= self.validity[i] == 1;
                    }
                }
                if all_valid {
                    let j = y * w + x;
                    u[j] = (su / norm).clamp(0.0, 1.0);
                    v[j] = (sv / norm).clamp(0.0, 1.0);
                    validity[j] = 1;
                }
            }
        }
        Self::new(h, w, u, v, validity)
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        out.write_all(UVF_MAGIC)?;
        out.write_all(&(self.height as u32).to_le_bytes())?;
        out.write_all(&(self.width as u32).to_le_bytes())?;
        for plane in [&self.u, &self.v] {
            for x in plane.iter() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        out.write_all(&self.validity)?;
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != UVF_MAGIC {
            return Err(Error::Shape(format!("bad uv magic {magic:?}")));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let height = u32::from_le_bytes(word) as usize;
        input.read_exact(&mut word)?;
        let width = u32::from_le_bytes(word) as usize;
        let n = height * width;
        let read_plane = |input: &mut dyn Read| -> Result<Vec<f32>> {
            let mut bytes = vec![0u8; n * 4];
            input.read_exact(&mut bytes)?;
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let u = read_plane(&mut input)?;
        let v = read_plane(&mut input)?;
        let mut validity = vec![0u8; n];
        input.read_exact(&mut validity)?;
        Self::new(height, width, u, v, validity)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::ingestion(path, e))?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::ingestion(path, e))?;
        Self::read_from(std::io::BufReader::new(file)).map_err(|e| Error::ingestion(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_pixels_are_zeroed() {
        let uv = UvField::new(1, 2, vec![0.3, 0.9], vec![0.4, 0.8], vec![1, 0]).unwrap();
        assert_eq!(uv.u(), &[0.3, 0.0]);
        assert_eq!(uv.v(), &[0.4, 0.0]);
    }

    #[test]
    fn out_of_range_valid_value_rejected() {
        assert!(UvField::new(1, 1, vec![1.5], vec![0.0], vec![1]).is_err());
    }

    #[test]
    fn uvf1_round_trip_is_byte_exact() {
        let uv = UvField::new(
            2,
            3,
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            vec![0.6; 6],
            vec![1, 1, 0, 1, 0, 1],
        )
        .unwrap();
        let mut bytes = Vec::new();
        uv.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 4 + 8 + 6 * 9);
        assert_eq!(&bytes[..4], b"UVF1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        let back = UvField::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, uv);
    }

    #[test]
    fn downsample_requires_full_validity() {
        let uv = UvField::new(2, 4, vec![0.2; 8], vec![0.4; 8], vec![1, 1, 1, 0, 1, 1, 1, 1]).unwrap();
        let d = uv.downsample(2).unwrap();
        assert_eq!(d.validity(), &[1, 0]);
        assert!((d.u()[0] - 0.2).abs() < 1e-7);
        assert_eq!(d.u()[1], 0.0);
    }
}
