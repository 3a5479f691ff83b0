// SPDX-License-Identifier: MIT OR Apache-2.0

//! Self-describing binary weight container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"IXCK"            magic
//! u32                format version (1)
//! u64                header length in bytes
//! [u8; header_len]   UTF-8 JSON header
//! f32 * N            row-major tensor data, in header order
//! ```
//!
//! The header holds a free-form `meta` object (model config, SAE settings,
//! ...) and a `tensors` list of `{name, rows, cols}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Transformer};
use crate::projection::ProjectionSet;
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"IXCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Matrix)>,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, m)| TensorEntry {
                    name: name.clone(),
                    rows: m.rows(),
                    cols: m.cols(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, m) in &self.tensors {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut offset = 16 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let n = t.rows * t.cols;
            let raw = bytes
                .get(offset..offset + 4 * n)
                .ok_or_else(|| Error::Format(format!("truncated tensor {}", t.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((t.name, Matrix::from_vec(t.rows, t.cols, data)));
            offset += 4 * n;
        }
        if offset != bytes.len() {
            return Err(Error::Format("trailing bytes after tensors".into()));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn model_to_container(model: &Transformer) -> Result<Container> {
    Ok(Container {
        meta: serde_json::json!({ "kind": "transformer", "config": model.config() }),
        tensors: model
            .params()
            .names
            .iter()
            .cloned()
            .zip(model.params().tensors.iter().cloned())
            .collect(),
    })
}

pub fn model_from_container(c: Container) -> Result<Transformer> {
    if c.meta.get("kind").and_then(|k| k.as_str()) != Some("transformer") {
        return Err(Error::Format("container does not hold a transformer".into()));
    }
    let config: ModelConfig = serde_json::from_value(c.meta["config"].clone())?;
    let (names, tensors): (Vec<String>, Vec<Matrix>) = c.tensors.into_iter().unzip();
    Transformer::from_params(config, &names, tensors)
}

pub fn save_model(model: &Transformer, path: &Path) -> Result<()> {
    model_to_container(model)?.save(path)
}

pub fn load_model(path: &Path) -> Result<Transformer> {
    model_from_container(Container::load(path)?)
}

pub fn projections_to_container(p: &ProjectionSet) -> Container {
    Container {
        meta: serde_json::json!({ "kind": "projections" }),
        tensors: p
            .maps
            .iter()
            .map(|(l, m)| (format!("proj.{l}"), m.clone()))
            .collect(),
    }
}

pub fn projections_from_container(c: Container) -> Result<ProjectionSet> {
    if c.meta.get("kind").and_then(|k| k.as_str()) != Some("projections") {
        return Err(Error::Format("container does not hold projections".into()));
    }
    let mut maps = std::collections::BTreeMap::new();
    for (name, m) in c.tensors {
        let layer = name
            .strip_prefix("proj.")
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::Format(format!("bad projection tensor name {name}")))?;
        maps.insert(layer, m);
    }
    Ok(ProjectionSet { maps })
}
