//! Named-array archive used for every checkpoint and frozen-network file.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic  b"FFAR0001"
//! u32    entry count
//! repeated, sorted by name:
//!   u32 name length, name bytes (UTF-8)
//!   u8  kind (0 = f32, 1 = f64, 2 = u8, 3 = utf-8 JSON text)
//!   u32 rank, rank × u64 dims
//!   u64 payload length in bytes, payload
//! ```
//!
//! Entries live in a `BTreeMap`, so encoding is a pure function of contents
//! and `save → load → save` is byte-identical.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 8] = b"FFAR0001";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    F32 = 0,
    F64 = 1,
    U8 = 2,
    Json = 3,
}

impl EntryKind {
    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => EntryKind::F32,
            1 => EntryKind::F64,
            2 => EntryKind::U8,
            3 => EntryKind::Json,
            other => return Err(Error::Checkpoint(format!("unknown entry kind {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    entries: BTreeMap<String, Entry>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: Entry) {
        self.entries.insert(name.into(), entry);
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        let shape = t.dims().to_vec();
        let flat = t.flatten_all()?;
        let (kind, bytes) = match t.dtype() {
            DType::F64 => (
                EntryKind::F64,
                flat.to_vec1::<f64>()?
                    .iter()
                    .flat_map(|x| x.to_le_bytes())
                    .collect(),
            ),
            DType::U8 => (EntryKind::U8, flat.to_vec1::<u8>()?),
            _ => (
                EntryKind::F32,
                flat.to_dtype(DType::F32)?
                    .to_vec1::<f32>()?
                    .iter()
                    .flat_map(|x| x.to_le_bytes())
                    .collect(),
            ),
        };
        self.insert(name, Entry { kind, shape, bytes });
        Ok(())
    }

    pub fn put_f32(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[f32]) {
        let bytes = data.iter().flat_map(|x| x.to_le_bytes()).collect();
        self.insert(
            name,
            Entry {
                kind: EntryKind::F32,
                shape,
                bytes,
            },
        );
    }

    pub fn get_f32(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let e = self.require(name)?;
        match e.kind {
            EntryKind::F32 => Ok((
                e.shape.clone(),
                e.bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )),
            EntryKind::F64 => Ok((
                e.shape.clone(),
                e.bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32)
                    .collect(),
            )),
            _ => Err(Error::Checkpoint(format!("entry `{name}` is not a float array"))),
        }
    }

    /// Decodes a numeric entry as a tensor of `dtype`.
    pub fn get_tensor(&self, name: &str, dtype: DType, device: &Device) -> Result<Tensor> {
        let e = self.require(name)?;
        let t = match e.kind {
            EntryKind::F32 => {
                let (shape, data) = self.get_f32(name)?;
                Tensor::from_vec(data, shape, device)?
            }
            EntryKind::F64 => {
                let data: Vec<f64> = e
                    .bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(data, e.shape.clone(), device)?
            }
            EntryKind::U8 => Tensor::from_vec(e.bytes.clone(), e.shape.clone(), device)?,
            EntryKind::Json => {
                return Err(Error::Checkpoint(format!("entry `{name}` is JSON, not an array")))
            }
        };
        Ok(t.to_dtype(dtype)?)
    }

    pub fn put_json<T: Serialize>(&mut self, name: impl Into<String>, value: &T) -> Result<()> {
        let text = serde_json::to_vec(value)?;
        self.insert(
            name,
            Entry {
                kind: EntryKind::Json,
                shape: vec![text.len()],
                bytes: text,
            },
        );
        Ok(())
    }

    pub fn get_json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        let e = self.require(name)?;
        if e.kind != EntryKind::Json {
            return Err(Error::Checkpoint(format!("entry `{name}` is not JSON")));
        }
        Ok(serde_json::from_slice(&e.bytes)?)
    }

    fn require(&self, name: &str) -> Result<&Entry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        out.write_all(ARCHIVE_MAGIC)?;
        out.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, e) in &self.entries {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&[e.kind as u8])?;
            out.write_all(&(e.shape.len() as u32).to_le_bytes())?;
            for &d in &e.shape {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            out.write_all(&(e.bytes.len() as u64).to_le_bytes())?;
            out.write_all(&e.bytes)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(Error::Checkpoint("not a facefill archive (bad magic)".into()));
        }
        let mut u32b = [0u8; 4];
        let mut u64b = [0u8; 8];
        input.read_exact(&mut u32b)?;
        let count = u32::from_le_bytes(u32b);
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            input.read_exact(&mut u32b)?;
            let mut name = vec![0u8; u32::from_le_bytes(u32b) as usize];
            input.read_exact(&mut name)?;
            let name =
                String::from_utf8(name).map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let mut kind = [0u8; 1];
            input.read_exact(&mut kind)?;
            let kind = EntryKind::from_byte(kind[0])?;
            input.read_exact(&mut u32b)?;
            let rank = u32::from_le_bytes(u32b) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                input.read_exact(&mut u64b)?;
                shape.push(u64::from_le_bytes(u64b) as usize);
            }
            input.read_exact(&mut u64b)?;
            let mut bytes = vec![0u8; u64::from_le_bytes(u64b) as usize];
            input.read_exact(&mut bytes)?;
            let elem = match kind {
                EntryKind::F32 => 4,
                EntryKind::F64 => 8,
                EntryKind::U8 | EntryKind::Json => 1,
            };
            if kind != EntryKind::Json && shape.iter().product::<usize>() * elem != bytes.len() {
                return Err(Error::Checkpoint(format!(
                    "entry `{name}` payload does not match shape {shape:?}"
                )));
            }
            entries.insert(name, Entry { kind, shape, bytes });
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::read_from(bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_identical() {
        let dev = Device::Cpu;
        let mut a = Archive::new();
        a.put_tensor("w", &Tensor::new(&[[1.5f32, -2.0], [0.25, 8.0]], &dev).unwrap())
            .unwrap();
        a.put_tensor("d", &Tensor::new(&[1.0f64, 2.0, 3.0], &dev).unwrap())
            .unwrap();
        a.put_json("meta", &serde_json::json!({"step": 3})).unwrap();
        let bytes = a.to_bytes();
        let b = Archive::read_from(bytes.as_slice()).unwrap();
        assert_eq!(a, b);
        assert_eq!(bytes, b.to_bytes());
        let w = b.get_tensor("w", DType::F32, &dev).unwrap();
        assert_eq!(
            w.to_vec2::<f32>().unwrap(),
            vec![vec![1.5, -2.0], vec![0.25, 8.0]]
        );
        let meta: serde_json::Value = b.get_json("meta").unwrap();
        assert_eq!(meta["step"], 3);
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(matches!(
            Archive::read_from(&b"NOTANARCHIVE"[..]),
            Err(Error::Checkpoint(_))
        ));
    }
}
