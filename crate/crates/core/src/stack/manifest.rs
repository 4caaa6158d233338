//! On-disk weights: a directory holding a JSON `manifest` and a flat
//! little-endian `tensors.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::weights::{tensor_layout, ModelWeights};
use crate::error::{config_err, Error, Result};
use crate::real::{Dtype, Real};

pub const MANIFEST_FILE: &str = "manifest";
pub const TENSORS_FILE: &str = "tensors.bin";
pub const FORMAT: &str = "hybrid-attn-weights/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    /// Byte offset into `tensors.bin`.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config_hash: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Input(format!("weight manifest: {}", msg.into()))
}

/// Serializes weights to the manifest text and the tensor bytes.
pub fn encode<T: Real>(cfg: &ModelConfig, weights: &ModelWeights<T>) -> Result<(String, Vec<u8>)> {
    cfg.validate()?;
    if cfg.dtype != T::DTYPE {
        return Err(config_err(format!("config dtype {} but weights are {}", cfg.dtype.name(), T::DTYPE.name())));
    }
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    let layout = tensor_layout(cfg);
    let named = weights.named_tensors();
    if layout.len() != named.len() {
        return Err(config_err("weights do not match the config layout"));
    }
    for ((name, shape), (wname, data)) in layout.into_iter().zip(named) {
        if name != wname || shape.iter().product::<usize>() != data.len() {
            return Err(config_err(format!("tensor {wname} does not match layout entry {name} {shape:?}")));
        }
        tensors.push(TensorEntry { name, shape, dtype: T::DTYPE, offset: bytes.len() as u64 });
        data.iter().for_each(|v| v.write_le(&mut bytes));
    }
    let manifest = Manifest { format: FORMAT.into(), config_hash: cfg.config_hash(), config: cfg.clone(), tensors };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    Ok((text, bytes))
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(text)?;
    if m.format != FORMAT {
        return Err(invalid(format!("unsupported format {:?}", m.format)));
    }
    m.config.validate()?;
    if m.config_hash != m.config.config_hash() {
        return Err(invalid("config_hash does not match the config block"));
    }
    Ok(m)
}

/// Inverse of [`encode`]; checks names, shapes, offsets and total length.
pub fn decode<T: Real>(text: &str, bytes: &[u8]) -> Result<(ModelConfig, ModelWeights<T>)> {
    let m = parse_manifest(text)?;
    if m.config.dtype != T::DTYPE {
        return Err(invalid(format!("stored dtype {} requested as {}", m.config.dtype.name(), T::DTYPE.name())));
    }
    let layout = tensor_layout(&m.config);
    if layout.len() != m.tensors.len() {
        return Err(invalid(format!("{} tensors listed, config needs {}", m.tensors.len(), layout.len())));
    }
    let width = T::DTYPE.size_bytes();
    let mut expected_offset = 0u64;
    for ((name, shape), e) in layout.iter().zip(&m.tensors) {
        if *name != e.name || *shape != e.shape || e.dtype != T::DTYPE {
            return Err(invalid(format!("entry {} {:?} does not match expected {name} {shape:?}", e.name, e.shape)));
        }
        if e.offset != expected_offset {
            return Err(invalid(format!("tensor {name} at offset {} expected {expected_offset}", e.offset)));
        }
        expected_offset += (shape.iter().product::<usize>() * width) as u64;
    }
    if bytes.len() as u64 != expected_offset {
        return Err(invalid(format!("{TENSORS_FILE} holds {} bytes, manifest needs {expected_offset}", bytes.len())));
    }
    let mut entries = m.tensors.iter();
    let w = ModelWeights::from_fn(&m.config, |name, shape| {
        let e = entries.next().expect("counts checked");
        debug_assert_eq!(e.name, name);
        let start = e.offset as usize;
        let end = start + shape.iter().product::<usize>() * width;
        Ok(bytes[start..end].chunks_exact(width).map(T::read_le).collect())
    })?;
    Ok((m.config, w))
}

pub fn write_dir<T: Real>(dir: &Path, cfg: &ModelConfig, weights: &ModelWeights<T>) -> Result<()> {
    let (text, bytes) = encode(cfg, weights)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    fs::write(dir.join(TENSORS_FILE), bytes)?;
    Ok(())
}

/// Reads just the manifest, e.g. to learn the stored dtype.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    parse_manifest(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
}

pub fn read_dir<T: Real>(dir: &Path) -> Result<(ModelConfig, ModelWeights<T>)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let bytes = fs::read(dir.join(TENSORS_FILE))?;
    decode(&text, &bytes)
}
