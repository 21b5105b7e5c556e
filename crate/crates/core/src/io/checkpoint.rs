use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::write_file;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{DiTConfig, DiTModel};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const PAYLOAD_FILE: &str = "tensors.bin";
pub const TENSOR_DTYPE: &str = "f32-le";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    pub dtype: String,
}

impl TensorEntry {
    pub fn byte_len(&self) -> u64 {
        4 * self.shape.iter().product::<usize>() as u64
    }
}

/// Plain-text header describing the raw tensor payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub payload: String,
    pub payload_bytes: u64,
    /// SHA-256 of the payload file.
    pub sha256: String,
    pub model: DiTConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DiTModel,
    /// SHA-256 of the manifest, which pins the payload through its own digest.
    pub digest: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `model` into directory `dir` (created if missing) and returns the
/// checkpoint digest.
pub fn save_checkpoint(model: &DiTModel, dir: &Path) -> Result<String> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, value) in model.param_names().iter().zip(model.param_values()) {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: value.shape().to_vec(),
            offset: payload.len() as u64,
            dtype: TENSOR_DTYPE.into(),
        });
        for v in value.data() {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        payload: PAYLOAD_FILE.into(),
        payload_bytes: payload.len() as u64,
        sha256: sha256_hex(&payload),
        model: model.config().clone(),
        tensors,
    };
    let text = toml::to_string(&manifest).expect("manifest serializes");
    write_file(&dir.join(PAYLOAD_FILE), &payload)?;
    write_file(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(sha256_hex(text.as_bytes()))
}

fn check_layout(path: &Path, m: &CheckpointManifest) -> Result<()> {
    let bad = |detail: String| Error::format(path, detail);
    if m.format_version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported format version {}", m.format_version)));
    }
    let mut end = 0;
    for t in &m.tensors {
        if t.dtype != TENSOR_DTYPE {
            return Err(bad(format!("tensor {} has dtype {}", t.name, t.dtype)));
        }
        if t.offset != end {
            return Err(bad(format!("tensor {} starts at {} instead of {end}", t.name, t.offset)));
        }
        end += t.byte_len();
    }
    if end != m.payload_bytes {
        return Err(bad(format!("tensors cover {end} bytes, payload declares {}", m.payload_bytes)));
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: CheckpointManifest =
        toml::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    check_layout(&manifest_path, &manifest)?;
    let payload_path = dir.join(&manifest.payload);
    let payload = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(Error::format(
            &payload_path,
            format!("payload has {} bytes, manifest declares {}", payload.len(), manifest.payload_bytes),
        ));
    }
    if sha256_hex(&payload) != manifest.sha256 {
        return Err(Error::format(&payload_path, "payload digest mismatch"));
    }
    let values = manifest
        .tensors
        .iter()
        .map(|t| {
            let start = t.offset as usize;
            let bytes = &payload[start..start + t.byte_len() as usize];
            let data = bytes
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect();
            Tensor::new(t.shape.clone(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    let model = DiTModel::from_values(manifest.model.clone(), values)
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    let names: Vec<&str> = manifest.tensors.iter().map(|t| t.name.as_str()).collect();
    if names != model.param_names().iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::format(&manifest_path, "tensor names do not match the model layout"));
    }
    Ok(Checkpoint {
        model,
        digest: sha256_hex(text.as_bytes()),
    })
}
