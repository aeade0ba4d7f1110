//! Binary checkpoint format.
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"LILTCKPT"
//! 8       4     format version, u32 little-endian (currently 1)
//! 12      8     header length H in bytes, u64 little-endian
//! 20      H     header, UTF-8 JSON (see `Header`)
//! 20+H    ...   payload: tensors as little-endian IEEE-754 f64, row-major
//! ```
//!
//! Tensor offsets in the header's manifest are relative to the start of the
//! payload. Model tensors use their parameter names; optimizer moments are
//! stored as `optim.m/<name>` and `optim.v/<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamW, AdamWConfig};

pub const MAGIC: &[u8; 8] = b"LILTCKPT";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: [usize; 2],
    pub offset: u64,
}

/// Seed and next step; all training randomness derives from these two.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub config: AdamWConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub step: u64,
    pub vocab_hash: String,
    pub rng: RngState,
    pub optimizer: Option<OptimizerHeader>,
    pub tensors: Vec<TensorEntry>,
    /// Free-form run metadata (training config, timestamps).
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamW>,
    pub step: u64,
    pub vocab_hash: String,
    pub rng: RngState,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: Model, vocab_hash: impl Into<String>) -> Self {
        Self {
            model,
            optimizer: None,
            step: 0,
            vocab_hash: vocab_hash.into(),
            rng: RngState::default(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors: Vec<(String, &Matrix)> = self.model.store.iter().map(|(_, n, v)| (n.to_string(), v)).collect();
        if let Some(opt) = &self.optimizer {
            for (id, name, _) in self.model.store.iter() {
                if let Some(m) = &opt.first_moment[id.0] {
                    tensors.push((format!("optim.m/{name}"), m));
                }
                if let Some(v) = &opt.second_moment[id.0] {
                    tensors.push((format!("optim.v/{name}"), v));
                }
            }
        }
        let mut offset = 0u64;
        let entries = tensors
            .iter()
            .map(|(name, m)| {
                let e = TensorEntry {
                    name: name.clone(),
                    dtype: "f64".into(),
                    shape: [m.nrows(), m.ncols()],
                    offset,
                };
                offset += (m.len() * 8) as u64;
                e
            })
            .collect();
        let header = Header {
            config: self.model.config.clone(),
            step: self.step,
            vocab_hash: self.vocab_hash.clone(),
            rng: self.rng,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config.clone(),
                step: o.step,
            }),
            tensors: entries,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in &tensors {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = split(bytes)?;
        let mut model = Model::new(header.config.clone(), 0)?;
        let mut by_name: BTreeMap<&str, &TensorEntry> = header.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
        let read = |e: &TensorEntry| -> Result<Matrix> {
            if e.dtype != "f64" {
                return Err(Error::Checkpoint(format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            let n = e.shape[0] * e.shape[1];
            let start = e.offset as usize;
            let end = start + n * 8;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` runs past the payload", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Matrix::from_shape_vec((e.shape[0], e.shape[1]), data).map_err(|err| Error::Checkpoint(err.to_string()))
        };

        let ids: Vec<_> = model.store.ids().collect();
        for &id in &ids {
            let name = model.store.name(id).to_string();
            let e = by_name
                .remove(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            let value = read(e)?;
            if value.dim() != model.store.get(id).dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    value.dim(),
                    model.store.get(id).dim()
                )));
            }
            *model.store.get_mut(id) = value;
        }

        let optimizer = match &header.optimizer {
            None => None,
            Some(oh) => {
                let mut opt = AdamW::new(oh.config.clone(), model.store.len());
                opt.step = oh.step;
                for &id in &ids {
                    let name = model.store.name(id);
                    if let Some(e) = by_name.remove(format!("optim.m/{name}").as_str()) {
                        opt.first_moment[id.0] = Some(read(e)?);
                    }
                    if let Some(e) = by_name.remove(format!("optim.v/{name}").as_str()) {
                        opt.second_moment[id.0] = Some(read(e)?);
                    }
                }
                Some(opt)
            }
        };
        if let Some(name) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
        }
        Ok(Self {
            model,
            optimizer,
            step: header.step,
            vocab_hash: header.vocab_hash,
            rng: header.rng,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn split(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < PREAMBLE || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(PREAMBLE..PREAMBLE + len)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    Ok((header, &bytes[PREAMBLE + len..]))
}

/// Reads only the header.
pub fn read_header(path: &Path) -> Result<Header> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split(&bytes)?.0)
}
