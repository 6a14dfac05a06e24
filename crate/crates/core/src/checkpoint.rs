//! Versioned checkpoint container.
//!
//! Layout: the magic line `CAPREWARD-CKPT`, a little-endian u64 header
//! length, a JSON header, then each tensor's values as little-endian bytes
//! in header order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8] = b"CAPREWARD-CKPT\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageTag {
    Xe,
    RewardCaptioner,
    Scst,
    Base,
    Discriminator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config_hash: String,
    pub stage: StageTag,
    /// Free-form provenance (reward kind, training step, parent hashes).
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Tensors whose names start with `prefix.`, with the prefix removed.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_owned(), v.clone())))
            .collect()
    }
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::InvalidInput(format!("unsupported checkpoint dtype {other:?}"))),
    }
}

/// Writes a checkpoint and returns the SHA-256 of the file.
pub fn save(
    path: &Path,
    config_hash: &str,
    stage: StageTag,
    meta: serde_json::Value,
    tensors: &[(String, Tensor)],
) -> Result<String> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut body = Vec::new();
    for (name, t) in tensors {
        let dtype = dtype_name(t.dtype())?;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.dims().to_vec(),
            dtype: dtype.into(),
        });
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| body.extend(v.to_le_bytes())),
            _ => flat.to_vec1::<f64>()?.iter().for_each(|v| body.extend(v.to_le_bytes())),
        }
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config_hash: config_hash.to_owned(),
        stage,
        meta,
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header_bytes.len() + body.len());
    out.extend_from_slice(MAGIC);
    out.extend((header_bytes.len() as u64).to_le_bytes());
    out.extend(header_bytes);
    out.extend(body);
    io::ensure_parent(path)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(io::sha256_hex(&out))
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_owned(),
        reason: reason.into(),
    }
}

/// Reads only the header.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_header(path, &bytes)?.0)
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    if !bytes.starts_with(MAGIC) || bytes.len() < MAGIC.len() + 8 {
        return Err(bad(path, "not a checkpoint file"));
    }
    let at = MAGIC.len();
    let len = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes")) as usize;
    let start = at + 8;
    let header_bytes = bytes
        .get(start..start + len)
        .ok_or_else(|| bad(path, "truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(header_bytes)?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(
            path,
            format!("format version {} (expected {FORMAT_VERSION})", header.format_version),
        ));
    }
    Ok((header, start + len))
}

/// Loads a checkpoint, rejecting a config-hash mismatch when one is given.
pub fn load(path: &Path, expected_config_hash: Option<&str>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, mut at) = parse_header(path, &bytes)?;
    if let Some(expected) = expected_config_hash {
        if header.config_hash != expected {
            return Err(bad(
                path,
                format!(
                    "config hash mismatch: checkpoint {}, current config {expected}",
                    header.config_hash
                ),
            ));
        }
    }
    let mut tensors = BTreeMap::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let t = match entry.dtype.as_str() {
            "f32" => {
                let raw = bytes.get(at..at + 4 * n).ok_or_else(|| bad(path, "truncated data"))?;
                at += 4 * n;
                let vals: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(vals, entry.shape.as_slice(), &Device::Cpu)?
            }
            "f64" => {
                let raw = bytes.get(at..at + 8 * n).ok_or_else(|| bad(path, "truncated data"))?;
                at += 8 * n;
                let vals: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_vec(vals, entry.shape.as_slice(), &Device::Cpu)?
            }
            other => return Err(bad(path, format!("unknown dtype {other}"))),
        };
        tensors.insert(entry.name.clone(), t);
    }
    if at != bytes.len() {
        return Err(bad(path, "trailing bytes after tensor data"));
    }
    Ok(Checkpoint { header, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let a = Tensor::new(&[[1.5f32, -2.0], [0.25, 8.0]], &Device::Cpu).unwrap();
        let b = Tensor::new(&[3.0f64], &Device::Cpu).unwrap();
        let hash = save(
            &path,
            "cfg-1",
            StageTag::Xe,
            serde_json::json!({"step": 3}),
            &[("p.a".into(), a.clone()), ("opt.b".into(), b)],
        )
        .unwrap();
        assert_eq!(hash, io::file_hash(&path).unwrap());
        let ck = load(&path, Some("cfg-1")).unwrap();
        assert_eq!(ck.header.stage, StageTag::Xe);
        assert_eq!(ck.group("p")["a"].to_vec2::<f32>().unwrap(), a.to_vec2::<f32>().unwrap());
        assert!(matches!(load(&path, Some("cfg-2")), Err(Error::Checkpoint { .. })));
        assert_eq!(read_header(&path).unwrap().meta["step"], 3);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        fs::write(&path, b"hello").unwrap();
        assert!(load(&path, None).is_err());
    }
}
