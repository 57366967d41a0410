//! Named-tensor container.
//!
//! A checkpoint is one JSON document:
//!
//! ```json
//! {
//!   "format": "varsmooth-tensors",
//!   "version": 1,
//!   "metadata": { ... },
//!   "tensors": [ { "name": "embedding", "shape": [V, d], "data": [ ... ] }, ... ]
//! }
//! ```
//!
//! `data` is row-major and always written as 64-bit floats; `metadata` is
//! free-form JSON owned by the caller.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Scalar, Tensor, TensorError};

pub const FORMAT: &str = "varsmooth-tensors";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a checkpoint (format {0:?})")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("tensor {name:?}: {source}")]
    Tensor { name: String, source: TensorError },
    #[error("missing tensor {0:?}")]
    Missing(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Document {
    format: String,
    version: u32,
    metadata: serde_json::Value,
    tensors: Vec<NamedTensor>,
}

/// An ordered set of named tensors plus metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorArchive {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorArchive {
    pub fn get(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn to_json(&self) -> Result<String, CheckpointError> {
        let doc = Document {
            format: FORMAT.to_string(),
            version: VERSION,
            metadata: self.metadata.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| NamedTensor {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    data: t.data().iter().map(|&x| x as f64).collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let doc: Document = serde_json::from_str(text)?;
        if doc.format != FORMAT {
            return Err(CheckpointError::Format(doc.format));
        }
        if doc.version != VERSION {
            return Err(CheckpointError::Version(doc.version));
        }
        let tensors = doc
            .tensors
            .into_iter()
            .map(|nt| {
                let data = nt.data.into_iter().map(|x| x as Scalar).collect();
                Tensor::new(nt.shape, data)
                    .map(|t| (nt.name.clone(), t))
                    .map_err(|source| CheckpointError::Tensor { name: nt.name, source })
            })
            .collect::<Result<_, _>>()?;
        Ok(TensorArchive { metadata: doc.metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_json()?)
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path)
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }
}
