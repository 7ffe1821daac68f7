//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic b"GERM"
//! 4       4     format version (u32) = 1
//! 8       8     header length H in bytes (u64)
//! 16      H     header, UTF-8 JSON with sorted keys
//! 16+H    ...   payload: tensors back to back in manifest order
//! ```
//!
//! The header holds `kind`, `step`, `variant`, `config`, `dtype`, free-form
//! `meta`, and `manifest`: a list of `{name, shape, dtype, offset}` where
//! `offset` is relative to the payload start. Values are stored as IEEE
//! `f32` or `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{AttentionVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GERM";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Model,
    Adapters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: Option<ModelConfig>,
    pub step: u64,
    pub dtype: Dtype,
    pub meta: BTreeMap<String, Value>,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: CheckpointKind,
    step: u64,
    variant: Option<AttentionVariant>,
    config: Option<ModelConfig>,
    dtype: Dtype,
    meta: BTreeMap<String, Value>,
    manifest: Vec<ManifestEntry>,
}

impl Checkpoint {
    pub fn new_model(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Self {
        Self {
            kind: CheckpointKind::Model,
            config: Some(config),
            step: 0,
            dtype: Dtype::F32,
            meta: BTreeMap::new(),
            tensors,
        }
    }

    pub fn new_adapters(tensors: BTreeMap<String, Tensor>) -> Self {
        Self {
            kind: CheckpointKind::Adapters,
            config: None,
            step: 0,
            dtype: Dtype::F64,
            meta: BTreeMap::new(),
            tensors,
        }
    }

    pub fn variant(&self) -> Option<AttentionVariant> {
        self.config.as_ref().map(|c| c.variant)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Rounds every value to the storage dtype so the in-memory checkpoint
    /// equals what `load` returns.
    pub fn round_to_dtype(&mut self) {
        if self.dtype == Dtype::F32 {
            for t in self.tensors.values_mut() {
                for v in t.data_mut() {
                    *v = *v as f32 as f64;
                }
            }
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            manifest.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: self.dtype,
                offset,
            });
            offset += (t.len() * self.dtype.size()) as u64;
        }
        let header = Header {
            kind: self.kind,
            step: self.step,
            variant: self.variant(),
            config: self.config.clone(),
            dtype: self.dtype,
            meta: self.meta.clone(),
            manifest,
        };
        // Going through Value sorts every object's keys.
        let header_bytes = serde_json::to_vec(&serde_json::to_value(&header)?)?;

        let mut out = Vec::with_capacity(PREAMBLE + header_bytes.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for t in self.tensors.values() {
            match self.dtype {
                Dtype::F32 => t
                    .data()
                    .iter()
                    .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
                Dtype::F64 => t
                    .data()
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < PREAMBLE {
            return Err(Error::CorruptManifest("truncated preamble".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::VersionUnsupported(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = PREAMBLE
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::CorruptManifest("header extends past end of file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| Error::CorruptManifest(format!("header: {e}")))?;
        if header.variant != header.config.as_ref().map(|c| c.variant) {
            return Err(Error::CorruptManifest(
                "header variant disagrees with config".into(),
            ));
        }
        let payload = &bytes[header_end..];

        let mut tensors = BTreeMap::new();
        let mut expected_offset = 0u64;
        for entry in header.manifest {
            if entry.offset != expected_offset {
                return Err(Error::CorruptManifest(format!(
                    "tensor `{}` at offset {} (expected {})",
                    entry.name, entry.offset, expected_offset
                )));
            }
            let count: usize = entry.shape.iter().product();
            let nbytes = count * entry.dtype.size();
            let start = entry.offset as usize;
            let end = start
                .checked_add(nbytes)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| {
                    Error::CorruptManifest(format!("tensor `{}` out of bounds", entry.name))
                })?;
            let raw = &payload[start..end];
            let data: Vec<f64> = match entry.dtype {
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            let t = Tensor::new(entry.shape, data)
                .map_err(|e| Error::CorruptManifest(format!("tensor `{}`: {e}", entry.name)))?;
            if tensors.insert(entry.name.clone(), t).is_some() {
                return Err(Error::CorruptManifest(format!(
                    "duplicate tensor `{}`",
                    entry.name
                )));
            }
            expected_offset += nbytes as u64;
        }
        if expected_offset as usize != payload.len() {
            return Err(Error::CorruptManifest(format!(
                "payload has {} bytes, manifest covers {}",
                payload.len(),
                expected_offset
            )));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            step: header.step,
            dtype: header.dtype,
            meta: header.meta,
            tensors,
        })
    }

    /// Writes through a temporary file in the same directory, then renames.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes `bytes` to `path` via a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AttentionVariant;

    fn sample() -> Checkpoint {
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "b".to_string(),
            Tensor::matrix(2, 2, vec![1.5, -2.25, 0.0, 3.0]).unwrap(),
        );
        tensors.insert("a".to_string(), Tensor::vector(vec![0.1, 0.2]).unwrap());
        let mut c = Checkpoint::new_model(ModelConfig::toy(AttentionVariant::Softmax1), tensors);
        c.step = 17;
        c.meta.insert("note".into(), Value::String("x".into()));
        c.round_to_dtype();
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let mut c64 = c.clone();
        c64.dtype = Dtype::F64;
        c64.tensors
            .insert("pi".into(), Tensor::vector(vec![std::f64::consts::PI]).unwrap());
        let back = Checkpoint::from_bytes(&c64.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c64);
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.germ");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn rejects_bad_files() {
        let bytes = sample().to_bytes().unwrap();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&wrong), Err(Error::BadMagic)));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Checkpoint::from_bytes(truncated),
            Err(Error::CorruptManifest(_))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..10]),
            Err(Error::CorruptManifest(_))
        ));

        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&v2),
            Err(Error::VersionUnsupported(2))
        ));

        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&extra),
            Err(Error::CorruptManifest(_))
        ));
    }

    #[test]
    fn header_keys_are_sorted() {
        let bytes = sample().to_bytes().unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[16..16 + len]).unwrap();
        let reparsed: Value = serde_json::from_str(text).unwrap();
        assert_eq!(serde_json::to_string(&reparsed).unwrap(), text);
        assert!(text.starts_with("{\"config\""));
    }
}
