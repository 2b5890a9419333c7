//! Model checkpoints.
//!
//! Layout, little-endian throughout: `KDSG`, u32 version, u32 class count,
//! u32 tensor count, then per tensor a u16 name length, the UTF-8 name, a u8
//! rank, u32 dims and the raw f32 values.

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::segnet::SegModel;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"KDSG";
pub const VERSION: u32 = 1;

/// Decoded checkpoint contents before they are checked against a layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub num_classes: u32,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn encode(model: &SegModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.num_classes() as u32).to_le_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(FormatError::Truncated { what, offset: self.pos });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| FormatError::BadMagic)? != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let num_classes = r.u32("class count")?;
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap());
        let name = std::str::from_utf8(r.take(name_len as usize, "name")?)
            .map_err(|_| FormatError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.take(1, "rank")?[0] as usize;
        if ndim > 4 {
            return Err(FormatError::Malformed(format!("tensor {name} has rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dims")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| FormatError::Malformed(format!("tensor {name} too large")))?;
        let raw = r.take(n, "tensor data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let value = Tensor::new(shape, data).map_err(|e| FormatError::Malformed(e.to_string()))?;
        tensors.push((name, value));
    }
    if r.pos != bytes.len() {
        return Err(FormatError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { num_classes, tensors })
}

/// Decodes and checks the tensors against the model's parameter layout.
pub fn decode_model(bytes: &[u8]) -> Result<SegModel> {
    let ck = decode(bytes)?;
    SegModel::from_named(ck.num_classes as usize, ck.tensors)
}

pub fn save_checkpoint(model: &SegModel, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<SegModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = decode(&bytes).map_err(|source| Error::CorruptFile { path: path.into(), source })?;
    SegModel::from_named(ck.num_classes as usize, ck.tensors)
        .map_err(|e| e.context(path.display().to_string()))
}
