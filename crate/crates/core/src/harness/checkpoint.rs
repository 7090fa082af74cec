//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `OPLM`, `u32` version, `u32` entry count,
//! then per entry a `u32` name length, the UTF-8 name, a `u32` rank, `rank`
//! `u64` extents and the `f64` data.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ndtensor::Tensor;

pub const MAGIC: &[u8; 4] = b"OPLM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => format_err(format!("checkpoint truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint has no entry `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses the whole buffer; any inconsistency is an error and nothing is returned.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return format_err("not a checkpoint (bad magic)");
        }
        let version = r.u32()?;
        if version != VERSION {
            return format_err(format!("checkpoint version {version}, expected {VERSION}"));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("entry name is not UTF-8".into()))?.to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let n = match n.filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len())) {
                Some(n) => n,
                None => return format_err(format!("entry `{name}` has an impossible shape {shape:?}")),
            };
            let raw = r.take(n * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return format_err("trailing bytes after the last entry");
        }
        Ok(Self { entries })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Bytes stored one per element.
pub fn bytes_to_tensor(bytes: &[u8]) -> Tensor {
    Tensor::vector(bytes.iter().map(|&b| b as f64).collect())
}

pub fn tensor_to_bytes(t: &Tensor) -> Result<Vec<u8>> {
    t.data()
        .iter()
        .map(|&v| if (0.0..=255.0).contains(&v) && v.fract() == 0.0 { Ok(v as u8) } else { format_err("byte entry out of range") })
        .collect()
}

/// 32-bit words stored one per element; exact in `f64`.
pub fn words_to_tensor(words: &[u32]) -> Tensor {
    Tensor::vector(words.iter().map(|&w| w as f64).collect())
}

pub fn tensor_to_words(t: &Tensor) -> Result<Vec<u32>> {
    t.data()
        .iter()
        .map(|&v| if (0.0..=u32::MAX as f64).contains(&v) && v.fract() == 0.0 { Ok(v as u32) } else { format_err("word entry out of range") })
        .collect()
}
