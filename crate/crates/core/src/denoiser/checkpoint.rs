//! Checkpoint container: an 8-byte magic, a little-endian `u32` format
//! version, a `u64` header length, a JSON header, then raw little-endian
//! `f32` arrays in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DenoiserConfig, DenoiserModel};
use crate::error::{ensure, Error, Result};

const MAGIC: &[u8; 8] = b"CRDIFFCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    /// Parameters are the exponential moving average `θ̂`.
    pub ema: bool,
    #[serde(default)]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: DenoiserConfig,
    meta: CheckpointMeta,
    arrays: Vec<ArrayEntry>,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Writes a container atomically (temporary file, then rename).
pub(crate) fn write_container(
    path: &Path,
    config: &DenoiserConfig,
    meta: &CheckpointMeta,
    arrays: &[(ArrayEntry, &[f32])],
    extra: serde_json::Value,
) -> Result<()> {
    for (entry, data) in arrays {
        ensure!(
            entry.shape.iter().product::<usize>() == data.len(),
            Checkpoint,
            "array {} has {} values for shape {:?}",
            entry.name,
            data.len(),
            entry.shape
        );
    }
    let header = Header {
        config: config.clone(),
        meta: meta.clone(),
        arrays: arrays.iter().map(|(e, _)| e.clone()).collect(),
        extra,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Serialization(e.to_string()))?;
    let total: usize = arrays.iter().map(|(_, d)| d.len()).sum();
    let mut buf = Vec::with_capacity(20 + json.len() + 4 * total);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, data) in arrays {
        for v in data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) struct Container {
    pub config: DenoiserConfig,
    pub meta: CheckpointMeta,
    pub arrays: Vec<(ArrayEntry, Vec<f32>)>,
    pub extra: serde_json::Value,
}

pub(crate) fn read_container(path: &Path) -> Result<Container> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("bad header: {e}")))?;
    let mut at = 20 + hlen;
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for entry in header.arrays {
        let n: usize = entry.shape.iter().product();
        let raw = bytes.get(at..at + 4 * n).ok_or_else(|| bad("truncated data"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        at += 4 * n;
        arrays.push((entry, data));
    }
    if at != bytes.len() {
        return Err(bad("trailing bytes after data"));
    }
    Ok(Container {
        config: header.config,
        meta: header.meta,
        arrays,
        extra: header.extra,
    })
}

pub(crate) fn model_arrays<'a>(model: &'a DenoiserModel<f32>, params: &'a [f32]) -> Vec<(ArrayEntry, &'a [f32])> {
    model
        .layout()
        .specs
        .iter()
        .map(|s| {
            (
                ArrayEntry { name: s.name.clone(), shape: s.shape.clone() },
                &params[s.offset..s.offset + s.len()],
            )
        })
        .collect()
}

/// Rebuilds a model from the parameter arrays of a container, checking
/// names and shapes against the architecture implied by its config.
pub(crate) fn model_from_arrays(
    config: DenoiserConfig,
    arrays: &[(ArrayEntry, Vec<f32>)],
) -> Result<DenoiserModel<f32>> {
    let mut model = DenoiserModel::<f32>::new(config, 0)?;
    let specs = model.layout().specs.clone();
    ensure!(
        arrays.len() >= specs.len(),
        Checkpoint,
        "checkpoint has {} arrays, model needs {}",
        arrays.len(),
        specs.len()
    );
    for (spec, (entry, data)) in specs.iter().zip(arrays) {
        ensure!(
            spec.name == entry.name && spec.shape == entry.shape,
            Checkpoint,
            "array {} {:?} does not match parameter {} {:?}",
            entry.name,
            entry.shape,
            spec.name,
            spec.shape
        );
        model.params_mut()[spec.offset..spec.offset + spec.len()].copy_from_slice(data);
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &DenoiserModel<f32>, meta: &CheckpointMeta) -> Result<()> {
    let arrays = model_arrays(model, model.params());
    write_container(path, model.config(), meta, &arrays, serde_json::Value::Null)
}

pub fn load_checkpoint(path: &Path) -> Result<(DenoiserModel<f32>, CheckpointMeta)> {
    let c = read_container(path)?;
    let model = model_from_arrays(c.config, &c.arrays)?;
    Ok((model, c.meta))
}
