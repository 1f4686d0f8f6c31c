//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"PSEGCKPT"            8-byte magic
//! u32                    container version
//! u64                    header length in bytes
//! header                 UTF-8 JSON: version, model config, stride, feature
//!                        dimension, fusion mode, free-form metadata and an
//!                        array directory {name, shape, offset, len}
//! payload                f32 values of every array, concatenated
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Fusion, Model, ModelConfig, STRIDE};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PSEGCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    stride: usize,
    feature_dim: usize,
    fusion: Fusion,
    #[serde(default)]
    metadata: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Everything a checkpoint file holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub config: ModelConfig,
    pub metadata: serde_json::Value,
    pub arrays: Vec<StoredArray>,
}

impl Container {
    pub fn from_model(model: &Model<f32>, metadata: serde_json::Value) -> Self {
        let arrays = model
            .arrays()
            .into_iter()
            .map(|a| StoredArray {
                name: a.name,
                shape: a.shape,
                values: a.values.to_vec(),
            })
            .collect();
        Self {
            config: model.config.clone(),
            metadata,
            arrays,
        }
    }

    pub fn array(&self, name: &str) -> Option<&StoredArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Rebuilds the model stored in this container.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let mut model = Model::<f32>::init(&self.config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .arrays()
            .into_iter()
            .map(|a| (a.name, a.shape))
            .collect();
        for ((name, shape), dst) in expected.iter().zip(model.arrays_mut()) {
            let stored = self
                .array(name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing array `{name}`")))?;
            if &stored.shape != shape {
                return Err(Error::ShapeMismatch(format!(
                    "`{name}` stored as {:?}, model expects {shape:?}",
                    stored.shape
                )));
            }
            dst.copy_from_slice(&stored.values);
        }
        Ok(model)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut offset = 0;
        for a in &self.arrays {
            entries.push(ArrayEntry {
                name: a.name.clone(),
                shape: a.shape.clone(),
                offset,
                len: a.values.len(),
            });
            offset += a.values.len();
        }
        let header = Header {
            version: VERSION,
            config: self.config.clone(),
            stride: STRIDE,
            feature_dim: self.config.feature_dim(),
            fusion: self.config.fusion,
            metadata: self.metadata.clone(),
            arrays: entries,
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut buf = Vec::with_capacity(20 + header.len() + 4 * offset);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for a in &self.arrays {
            for v in &a.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("partial");
        let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        file.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        file.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version > VERSION {
            return Err(Error::CorruptCheckpoint(format!(
                "unsupported version {version}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
        let payload = &bytes[header_end..];
        let total: usize = header.arrays.iter().map(|a| a.len).sum();
        if payload.len() != 4 * total {
            return Err(corrupt("payload length does not match array directory"));
        }
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            if e.shape.iter().product::<usize>() != e.len || 4 * (e.offset + e.len) > payload.len()
            {
                return Err(Error::CorruptCheckpoint(format!(
                    "bad directory entry `{}`",
                    e.name
                )));
            }
            let values = payload[4 * e.offset..4 * (e.offset + e.len)]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push(StoredArray {
                name: e.name,
                shape: e.shape,
                values,
            });
        }
        Ok(Self {
            config: header.config,
            metadata: header.metadata,
            arrays,
        })
    }
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    Container::from_model(model, serde_json::Value::Null).write(path)
}

/// Loads a model with whatever configuration the file declares.
pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    Container::read(path)?.to_model()
}

/// Loads a model and checks that its configuration equals `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Model<f32>> {
    let container = Container::read(path)?;
    if &container.config != expected {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint config {:?} differs from model config {:?}",
            container.config, expected
        )));
    }
    container.to_model()
}

/// Copies externally supplied encoder weights (any checkpoint container whose
/// `encoder.*` arrays match this model's encoder) into `model`.
pub fn load_encoder_weights(model: &mut Model<f32>, path: &Path) -> Result<()> {
    let container = Container::read(path)?;
    let names: Vec<(String, Vec<usize>)> = model
        .arrays()
        .into_iter()
        .map(|a| (a.name, a.shape))
        .collect();
    for ((name, shape), dst) in names.iter().zip(model.arrays_mut()) {
        if !name.starts_with("encoder.") {
            continue;
        }
        let stored = container
            .array(name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing encoder array `{name}`")))?;
        if &stored.shape != shape {
            return Err(Error::ShapeMismatch(format!(
                "`{name}` stored as {:?}, encoder expects {shape:?}",
                stored.shape
            )));
        }
        dst.copy_from_slice(&stored.values);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            Container::decode(b"not a checkpoint at all"),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::<f32>::init(&ModelConfig::tiny(), 1).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(matches!(
            Container::decode(&bytes[..bytes.len() - 4]),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn mismatched_config_is_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::<f32>::init(&ModelConfig::tiny(), 1).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let mut other = ModelConfig::tiny();
        other.encoder_channels[3] = 24;
        assert!(matches!(
            load_checkpoint_for(&path, &other),
            Err(Error::ShapeMismatch(_))
        ));
        let mut target = Model::<f32>::init(&other, 0).unwrap();
        assert!(matches!(
            load_encoder_weights(&mut target, &path),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
