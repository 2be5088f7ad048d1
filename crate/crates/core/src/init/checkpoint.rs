//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   b"NMTCKPT\0"
//! version      u32       FORMAT_VERSION
//! header_len   u64       byte length of the header
//! header       UTF-8 JSON {"format_version", "config", "tensors": [{"name","dtype","shape"}]}
//! payload      raw tensor data in directory order, little-endian
//! ```
//!
//! The directory must list exactly the config's shape table, in order.

use std::fs;
use std::io::Write;
use std::path::Path;

use nmt_tensor::{DType, Float, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ParamStore, TransformerModel};

pub const MAGIC: &[u8; 8] = b"NMTCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("tensor directory does not match the config shape table: {0}")]
    ShapeTableMismatch(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} unexpected bytes after payload")]
    TrailingBytes(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DirectoryEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<DirectoryEntry>,
}

/// Config plus named tensors in shape-table order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F: Float = f32> {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<F>)>,
}

impl<F: Float> Checkpoint<F> {
    pub fn from_model(model: &TransformerModel<F>) -> Self {
        Checkpoint {
            config: model.config.clone(),
            tensors: model.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn into_model(self) -> crate::Result<TransformerModel<F>> {
        TransformerModel::new(self.config, ParamStore::new(self.tensors)?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Canonical byte encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| DirectoryEntry { name: n.clone(), dtype: F::DTYPE.name().into(), shape: t.shape().to_vec() })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let payload_len: usize = self.tensors.iter().map(|(_, t)| t.len() * F::DTYPE.size()).sum();
        let mut out = Vec::with_capacity(20 + header.len() + payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        out
    }

    /// Parses and validates; the header is fully checked before any payload is read.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 20 {
            return Err(CheckpointError::Truncated { expected: 20, found: bytes.len() });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize.checked_add(header_len).ok_or(CheckpointError::Header("length overflow".into()))?;
        if bytes.len() < header_end {
            return Err(CheckpointError::Truncated { expected: header_end, found: bytes.len() });
        }
        let header: Header =
            serde_json::from_slice(&bytes[20..header_end]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.format_version != version {
            return Err(CheckpointError::Header("header and prefix versions disagree".into()));
        }
        header.config.validate().map_err(|e| CheckpointError::Header(e.to_string()))?;

        let table = header.config.shape_table();
        if table.len() != header.tensors.len() {
            return Err(CheckpointError::ShapeTableMismatch(format!(
                "{} tensors listed, shape table has {}",
                header.tensors.len(),
                table.len()
            )));
        }
        let mut dtypes = Vec::with_capacity(table.len());
        for ((name, shape), entry) in table.iter().zip(&header.tensors) {
            if &entry.name != name || &entry.shape != shape {
                return Err(CheckpointError::ShapeTableMismatch(format!(
                    "found {} {:?}, expected {name} {shape:?}",
                    entry.name, entry.shape
                )));
            }
            let dtype = DType::parse(&entry.dtype)
                .ok_or_else(|| CheckpointError::Header(format!("unknown dtype {}", entry.dtype)))?;
            dtypes.push(dtype);
        }

        let expected: usize = table.iter().zip(&dtypes).map(|((_, s), d)| s.iter().product::<usize>() * d.size()).sum();
        let payload = &bytes[header_end..];
        if payload.len() < expected {
            return Err(CheckpointError::Truncated { expected, found: payload.len() });
        }
        if payload.len() > expected {
            return Err(CheckpointError::TrailingBytes(payload.len() - expected));
        }

        let mut offset = 0;
        let mut tensors = Vec::with_capacity(table.len());
        for ((name, shape), dtype) in table.into_iter().zip(dtypes) {
            let n: usize = shape.iter().product();
            let size = dtype.size();
            let data: Vec<F> = (0..n)
                .map(|i| {
                    let b = &payload[offset + i * size..offset + (i + 1) * size];
                    match dtype {
                        DType::F32 => F::from_f32(f32::read_le(b)).unwrap(),
                        DType::F64 => F::from_f64(f64::read_le(b)).unwrap(),
                    }
                })
                .collect();
            offset += n * size;
            tensors.push((name, Tensor::from_vec(&shape, data).expect("sized by shape")));
        }
        Ok(Checkpoint { config: header.config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn save_checkpoint<F: Float>(model: &TransformerModel<F>, path: &Path) -> Result<(), CheckpointError> {
    Checkpoint::from_model(model).save(path)
}

pub fn load_checkpoint<F: Float>(path: &Path) -> Result<Checkpoint<F>, CheckpointError> {
    Checkpoint::load(path)
}
