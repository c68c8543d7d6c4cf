//! Checkpoint format:
//!
//! ```text
//! magic "GHCK" | version u32 | entry count u32
//! per entry: name length u32 | name bytes | ndims u32 | dims u64 × ndims
//! parameters: f64 × total, manifest order
//! ```
//! All integers and floats little-endian.

use std::path::Path;

use super::{ModelDims, ModelParams};
use crate::error::{Error, Result};
use crate::linalg::ShapeManifest;

const MAGIC: &[u8; 4] = b"GHCK";
const VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let manifest = params.manifest();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    for (name, dims) in manifest.entries() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
    }
    for v in params.to_flat().values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn dims_from_manifest(manifest: &ShapeManifest) -> Result<ModelDims> {
    let find = |name: &str| -> Result<&Vec<usize>> {
        manifest
            .entries()
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d)
            .ok_or_else(|| Error::Checkpoint(format!("manifest lacks `{name}`")))
    };
    let pair = |name: &str| -> Result<(usize, usize)> {
        match find(name)?.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Checkpoint(format!("`{name}` has dims {other:?}"))),
        }
    };
    let (d, video_in) = pair("tokenizer_v.weight")?;
    let (_, audio_in) = pair("tokenizer_a.weight")?;
    let (_, text_in) = pair("tokenizer_t.weight")?;
    let (va_dim, _) = pair("head_v_va.weight")?;
    let (vt_dim, _) = pair("head_v_vt.weight")?;
    let backbone_layers = manifest
        .entries()
        .iter()
        .filter(|(n, _)| n.starts_with("backbone.") && n.ends_with(".weight"))
        .count();
    Ok(ModelDims {
        video_in,
        audio_in,
        text_in,
        backbone_dim: d,
        backbone_layers,
        va_dim,
        vt_dim,
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n_entries = r.u32()? as usize;
    let mut entries = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
            .to_string();
        let nd = r.u32()? as usize;
        let dims = (0..nd)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        entries.push((name, dims));
    }
    let manifest = ShapeManifest::new(entries).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let dims = dims_from_manifest(&manifest)?;
    let mut params = ModelParams::zeros(&dims).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if **params.manifest() != manifest {
        return Err(Error::Checkpoint(
            "manifest does not describe a model of this architecture".into(),
        ));
    }
    let total = manifest.total_len();
    let raw = r.take(total * 8)?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let flat: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    params
        .set_flat(&flat)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
