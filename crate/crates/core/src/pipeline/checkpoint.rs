//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `TYNC`, u32 version, u32 tensor count, then
//! per tensor a u32 name length, the UTF-8 name, u32 rank, rank × u32 dims
//! and the f32 values. Model parameters use their own names; everything
//! else lives under the reserved prefixes below.

use std::fs;
use std::path::Path;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TYNC";
pub const VERSION: u32 = 1;

pub const BN_MEAN_PREFIX: &str = "bn.mean:";
pub const BN_VAR_PREFIX: &str = "bn.var:";
pub const MOMENTUM_PREFIX: &str = "momentum:";
/// Text payloads, one byte per value.
pub const META_PREFIX: &str = "meta:";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl NamedTensor {
    /// Values are narrowed to f32.
    pub fn from_f64(name: impl Into<String>, shape: &[usize], values: &[f64]) -> Self {
        NamedTensor { name: name.into(), shape: shape.to_vec(), values: values.iter().map(|&v| v as f32).collect() }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Data(format!("checkpoint truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

impl Checkpoint {
    pub fn push(&mut self, t: NamedTensor) {
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn push_text(&mut self, key: &str, text: &str) {
        let bytes = text.as_bytes();
        self.push(NamedTensor {
            name: format!("{META_PREFIX}{key}"),
            shape: vec![bytes.len()],
            values: bytes.iter().map(|&b| b as f32).collect(),
        });
    }

    pub fn text(&self, key: &str) -> Result<String> {
        let name = format!("{META_PREFIX}{key}");
        let t = self.get(&name).ok_or_else(|| Error::Data(format!("checkpoint lacks {name}")))?;
        let bytes: Vec<u8> = t.values.iter().map(|&v| v as u8).collect();
        String::from_utf8(bytes).map_err(|_| Error::Data(format!("{name} is not UTF-8")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Data("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Data(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::new();
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let name =
                String::from_utf8(r.take(len, "name")?.to_vec()).map_err(|_| Error::Data(format!("tensor {i}: name is not UTF-8")))?;
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Data(format!("{name}: size overflow")))?, &name)?;
            let values = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            tensors.push(NamedTensor { name, shape, values });
        }
        if r.pos != bytes.len() {
            return Err(Error::Data(format!("{} trailing bytes after {count} tensors", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::raster::write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
