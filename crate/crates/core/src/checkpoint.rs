//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MMTP"  u16 version  u32 len  <len bytes of ModelConfig JSON>
//! repeated until EOF:
//!   u32 name_len  <name, UTF-8>  u32 rank  rank × u32 extent  numel × f32
//! ```

use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Predictor;
use crate::tensor::{numel, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"MMTP";
pub const VERSION: u16 = 1;

pub fn to_bytes(config: &ModelConfig, params: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(config)?;
    out.extend_from_slice(&len_u32(json.len())?.to_le_bytes());
    out.extend_from_slice(&json);
    for p in params.iter() {
        out.extend_from_slice(&len_u32(p.name.len())?.to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&len_u32(p.value.rank())?.to_le_bytes());
        for &e in p.value.shape() {
            out.extend_from_slice(&len_u32(e)?.to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Dimension(format!("{n} does not fit in a u32 field")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Version(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// A parameter name and its value.
pub type NamedTensor = (String, Tensor<f32>);

/// Parses a checkpoint into its config and named tensors.
pub fn from_bytes(buf: &[u8]) -> Result<(ModelConfig, Vec<NamedTensor>)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Version("not a checkpoint (bad magic)".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Version(format!("format version {version}, this build reads {VERSION}")));
    }
    let len = r.u32()? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Version(format!("unreadable config header: {e}")))?;
    let mut tensors = Vec::new();
    while !r.done() {
        let n = r.u32()? as usize;
        let name =
            String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Version("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let count = numel(&shape);
        let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Version("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok((config, tensors))
}

pub fn save(path: &Path, predictor: &Predictor) -> Result<()> {
    fs::write(path, to_bytes(predictor.config(), &predictor.params)?)?;
    Ok(())
}

/// Rebuilds a predictor. Every parameter of the configured network must be
/// present with the expected shape, and nothing else may be.
pub fn restore(config: ModelConfig, tensors: Vec<NamedTensor>) -> Result<Predictor> {
    let mut p = Predictor::new(&config, 0).map_err(|e| Error::Version(format!("config in checkpoint: {e}")))?;
    if tensors.len() != p.params.len() {
        return Err(Error::Version(format!(
            "checkpoint holds {} tensors, the configured model has {}",
            tensors.len(),
            p.params.len()
        )));
    }
    for (name, t) in tensors {
        let id = p.params.find(&name).ok_or_else(|| Error::Version(format!("unknown tensor {name}")))?;
        let slot = p.params.get_mut(id);
        if slot.shape() != t.shape() {
            return Err(Error::Version(format!(
                "tensor {name} has shape {:?}, the model expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(p)
}

pub fn load(path: &Path) -> Result<Predictor> {
    let (config, tensors) = from_bytes(&fs::read(path)?)?;
    restore(config, tensors)
}
