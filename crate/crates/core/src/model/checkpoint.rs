//! Single-file checkpoint: `u64` little-endian manifest length, the JSON
//! manifest, then every tensor as raw little-endian `f32` in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams, Tensor};
use crate::error::{Error, Result};
use crate::numerics::Array;

const FORMAT: &str = "tryflow-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    n_train: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    label: String,
    trainable: bool,
    /// Byte offset into the payload section.
    offset: usize,
    length: usize,
}

pub fn write_checkpoint(params: &ModelParams) -> Result<Vec<u8>> {
    let mut offset = 0;
    let tensors = params
        .tensors
        .iter()
        .map(|t| {
            let length = t.value.len() * 4;
            let e = TensorEntry {
                name: t.name.clone(),
                shape: t.value.shape().to_vec(),
                label: t.label.clone(),
                trainable: t.trainable,
                offset,
                length,
            };
            offset += length;
            e
        })
        .collect();
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: params.config.clone(),
        n_train: params.n_train,
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(8 + json.len() + offset);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &params.tensors {
        for v in t.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let bad = |m: &str| Error::Format(m.to_string());
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| bad("file shorter than header"))?.try_into().expect("8 bytes");
    let json_len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| bad("manifest length overflow"))?;
    let json = bytes.get(8..8 + json_len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(json)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint {} v{}", manifest.format, manifest.version)));
    }
    let payload = &bytes[8 + json_len..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut expected_offset = 0;
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        if e.length != n * 4 || e.offset != expected_offset {
            return Err(Error::Format(format!("tensor `{}` has inconsistent offset/length", e.name)));
        }
        let raw = payload
            .get(e.offset..e.offset + e.length)
            .ok_or_else(|| Error::Format(format!("tensor `{}` payload truncated", e.name)))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        expected_offset += e.length;
        tensors.push(Tensor { name: e.name, label: e.label, value: Array::new(e.shape, data)?, trainable: e.trainable });
    }
    if expected_offset != payload.len() {
        return Err(bad("trailing bytes after last tensor"));
    }
    let params = ModelParams { config: manifest.config, tensors, n_train: manifest.n_train };
    params.check_structure()?;
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let bytes = write_checkpoint(params)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
