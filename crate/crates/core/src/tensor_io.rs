//! Raw little-endian f32 matrices with a JSON sidecar
//! (`{"rows": .., "cols": .., "description": ..}`) next to the data file,
//! sharing its stem: `keys.f32` pairs with `keys.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub rows: usize,
    pub cols: usize,
    #[serde(default)]
    pub description: String,
}

/// Row-major `rows x cols` f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub meta: TensorMeta,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>, description: impl Into<String>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self {
            meta: TensorMeta {
                rows,
                cols,
                description: description.into(),
            },
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.meta.rows
    }

    pub fn cols(&self) -> usize {
        self.meta.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.meta.cols..(i + 1) * self.meta.cols]
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(path, bytes)?;
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let meta: TensorMeta = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        let bytes = fs::read(path)?;
        let expected = meta.rows * meta.cols * 4;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "{}: {} bytes, sidecar says {}x{} ({} bytes)",
                path.display(),
                bytes.len(),
                meta.rows,
                meta.cols,
                expected
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { meta, data })
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}
