//! Binary tensor container used for adapter, memory-bank and training-state
//! files.
//!
//! Layout: the 8-byte magic `CUTCKPT\0`, a little-endian `u64` header
//! length, a JSON header `{version, kind, tensors: [{name, shape}], extra}`,
//! then every tensor's values as little-endian `f64` in header order.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::vlad::{FeatureAdapter, MemoryBank};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CUTCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    tensors: Vec<TensorHeader>,
    extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub tensors: Vec<Tensor>,
    pub extra: serde_json::Value,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

impl Container {
    pub fn new(kind: impl Into<String>, extra: serde_json::Value) -> Self {
        Self { kind: kind.into(), tensors: Vec::new(), extra }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(Tensor { name: name.into(), shape, data });
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: FORMAT_VERSION,
            kind: self.kind.clone(),
            tensors: self.tensors.iter().map(|t| TensorHeader { name: t.name.clone(), shape: t.shape.clone() }).collect(),
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.tensors.iter().map(|t| t.data.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad(path, "not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| bad(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(path, format!("header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(bad(path, format!("unsupported version {}", header.version)));
        }
        let mut at = 16 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for th in header.tensors {
            let n: usize = th.shape.iter().product();
            let raw = bytes.get(at..at + n * 8).ok_or_else(|| bad(path, format!("truncated tensor {}", th.name)))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            at += n * 8;
            tensors.push(Tensor { name: th.name, shape: th.shape, data });
        }
        if at != bytes.len() {
            return Err(bad(path, "trailing bytes"));
        }
        Ok(Self { kind: header.kind, tensors, extra: header.extra })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| bad(path, e.to_string()))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn expect_kind(self, kind: &str, path: &Path) -> Result<Self> {
        if self.kind != kind {
            return Err(bad(path, format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(self)
    }

    fn matrix(&self, name: &str, path: &Path) -> Result<Array2<f64>> {
        let t = self.tensor(name).ok_or_else(|| bad(path, format!("missing tensor {name}")))?;
        if t.shape.len() != 2 {
            return Err(bad(path, format!("{name} is not a matrix")));
        }
        Ok(Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone()).expect("shape matches data"))
    }

    fn vector(&self, name: &str, path: &Path) -> Result<Array1<f64>> {
        let t = self.tensor(name).ok_or_else(|| bad(path, format!("missing tensor {name}")))?;
        Ok(Array1::from(t.data.clone()))
    }
}

pub const ADAPTER_KIND: &str = "adapter";
pub const BANK_KIND: &str = "bank";

fn stage_ids(c: &Container, path: &Path) -> Result<Vec<String>> {
    serde_json::from_value(c.extra.get("stage_ids").cloned().unwrap_or_default()).map_err(|e| bad(path, format!("stage_ids: {e}")))
}

pub fn adapter_container(adapter: &FeatureAdapter) -> Container {
    let dims: Vec<usize> = adapter.weights.iter().map(|w| w.ncols()).collect();
    let mut c = Container::new(
        ADAPTER_KIND,
        serde_json::json!({ "stage_ids": adapter.stage_ids, "stage_dims": dims, "embed_dim": adapter.embed_dim() }),
    );
    for ((id, w), b) in adapter.stage_ids.iter().zip(&adapter.weights).zip(&adapter.biases) {
        c.push(format!("{id}.weight"), vec![w.nrows(), w.ncols()], w.iter().copied().collect());
        c.push(format!("{id}.bias"), vec![b.len()], b.to_vec());
    }
    c
}

pub fn adapter_from_container(c: &Container, path: &Path) -> Result<FeatureAdapter> {
    let ids = stage_ids(c, path)?;
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for id in &ids {
        weights.push(c.matrix(&format!("{id}.weight"), path)?);
        biases.push(c.vector(&format!("{id}.bias"), path)?);
    }
    if ids.is_empty() {
        return Err(bad(path, "adapter has no stages"));
    }
    Ok(FeatureAdapter { stage_ids: ids, weights, biases })
}

pub fn save_adapter(adapter: &FeatureAdapter, path: &Path) -> Result<()> {
    adapter_container(adapter).write(path)
}

pub fn load_adapter(path: &Path) -> Result<FeatureAdapter> {
    let c = Container::read(path)?.expect_kind(ADAPTER_KIND, path)?;
    adapter_from_container(&c, path)
}

pub fn save_bank(bank: &MemoryBank, path: &Path) -> Result<()> {
    let mut c = Container::new(BANK_KIND, serde_json::json!({ "stage_ids": bank.stage_ids, "rows_per_stage": bank.rows_per_stage() }));
    for (id, r) in bank.stage_ids.iter().zip(&bank.rows) {
        c.push(format!("{id}.rows"), vec![r.nrows(), r.ncols()], r.iter().copied().collect());
    }
    c.write(path)
}

pub fn load_bank(path: &Path) -> Result<MemoryBank> {
    let c = Container::read(path)?.expect_kind(BANK_KIND, path)?;
    let ids = stage_ids(&c, path)?;
    let rows = ids.iter().map(|id| c.matrix(&format!("{id}.rows"), path)).collect::<Result<_>>()?;
    MemoryBank::new(ids, rows).map_err(|e| bad(path, e.to_string()))
}
