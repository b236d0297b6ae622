//! Binary container shared by model checkpoints and dataset files.
//!
//! Layout: the 4-byte magic `TAPC`, a little-endian `u64` header length, a
//! UTF-8 JSON header, then every tensor's values as little-endian `f64` in
//! row-major order, in the order the header's `tensors` array declares them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Result, TapError};

const MAGIC: &[u8; 4] = b"TAPC";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            shape,
            data,
        }
    }
}

/// A JSON header plus an ordered list of f64 tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub header: Map<String, Value>,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn push(&mut self, tensor: Tensor) {
        self.tensors.push(tensor);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = self.header.clone();
        let entries: Vec<TensorEntry> = self
            .tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect();
        header.insert("tensors".into(), serde_json::to_value(entries)?);
        let header_bytes = serde_json::to_vec(&header)?;

        let payload: usize = self.tensors.iter().map(|t| t.data.len() * 8).sum();
        let mut out = Vec::with_capacity(12 + header_bytes.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| TapError::Format {
            path: None,
            reason: reason.to_string(),
        };
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing TAPC magic"));
        }
        let mut len_buf = [0u8; 8];
        len_buf.copy_from_slice(&bytes[4..12]);
        let header_len = u64::from_le_bytes(len_buf) as usize;
        let body_start = 12usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad("header length exceeds file size"))?;
        let mut header: Map<String, Value> = serde_json::from_slice(&bytes[12..body_start])?;
        let entries: Vec<TensorEntry> = match header.remove("tensors") {
            Some(v) => serde_json::from_value(v)?,
            None => return Err(bad("header has no tensors array")),
        };

        let mut offset = body_start;
        let mut tensors = Vec::with_capacity(entries.len());
        for entry in entries {
            let count: usize = entry.shape.iter().product();
            let end = offset + count * 8;
            if end > bytes.len() {
                return Err(bad(&format!("tensor {} truncated", entry.name)));
            }
            let data = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            offset = end;
            tensors.push(Tensor {
                name: entry.name,
                shape: entry.shape,
                data,
            });
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after last tensor"));
        }
        Ok(Self { header, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| TapError::io(parent, e))?;
        }
        fs::write(path, bytes).map_err(|e| TapError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| TapError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            TapError::Format { reason, .. } => TapError::Format {
                path: Some(path.to_path_buf()),
                reason,
            },
            other => other,
        })
    }

    /// Removes and returns the named tensor, checking its shape.
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let pos = self
            .tensors
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| TapError::Format {
                path: None,
                reason: format!("missing tensor {name}"),
            })?;
        let t = self.tensors.remove(pos);
        if t.shape != shape {
            return Err(TapError::shape(
                format!("tensor {name}"),
                format!("{shape:?}"),
                format!("{:?}", t.shape),
            ));
        }
        Ok(t.data)
    }

    pub fn header_usize(&self, key: &str) -> Result<usize> {
        self.header
            .get(key)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| TapError::Format {
                path: None,
                reason: format!("header field {key} missing or not an integer"),
            })
    }
}
