//! Binary checkpoint container.
//!
//! ```text
//! magic        8 bytes  "GTCNNCKP"
//! version      u32 LE
//! header_len   u32 LE
//! header       UTF-8 JSON {"format_version", "model"}
//! n_tensors    u32 LE
//! per tensor:  u32 name_len, name, u32 ndims, ndims x u32 dims, f32 LE values
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::gtcnn::Gtcnn;
use crate::autodiff::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GTCNNCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
}

pub fn encode<T: Real>(model: &Gtcnn<T>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&CheckpointHeader {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for d in &t.dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Gtcnn<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("bad magic, not a GTCNN checkpoint".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let hlen = r.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.format_version != version {
        return Err(Error::Checkpoint("header version disagrees with container".into()));
    }
    let n = r.u32()? as usize;
    let mut store = ParamStore::<f32>::new();
    for _ in 0..n {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let nd = r.u32()? as usize;
        let dims = (0..nd)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let raw = r.take(count.checked_mul(4).ok_or_else(|| {
            Error::Checkpoint(format!("{name}: tensor too large"))
        })?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        store.register(name, Tensor::new(dims, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Gtcnn::from_params(header.model, store)
}

pub fn save<T: Real>(model: &Gtcnn<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(model)?).map_err(|e| Error::file(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Gtcnn<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Selection;

    #[test]
    fn bytes_round_trip_exactly() {
        let model = Gtcnn::<f32>::new(ModelConfig::desk(Selection::Es).with_seed(3)).unwrap();
        let bytes = encode(&model).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let model = Gtcnn::<f32>::new(ModelConfig::desk(Selection::None)).unwrap();
        let mut bytes = encode(&model).unwrap();
        bytes[0] = b'X';
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn truncation_and_config_mismatch_are_rejected() {
        let model = Gtcnn::<f32>::new(ModelConfig::desk(Selection::None)).unwrap();
        let bytes = encode(&model).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());

        // Header claims a personalized model; tensors lack the projection.
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let header = serde_json::to_vec(&CheckpointHeader {
            format_version: FORMAT_VERSION,
            model: ModelConfig::desk(Selection::Es),
        })
        .unwrap();
        let mut swapped = bytes[..12].to_vec();
        swapped.extend_from_slice(&(header.len() as u32).to_le_bytes());
        swapped.extend_from_slice(&header);
        swapped.extend_from_slice(&bytes[16 + hlen..]);
        assert!(decode(&swapped).is_err());
    }
}
