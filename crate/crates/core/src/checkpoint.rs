//! Checkpoint container.
//!
//! Layout: the 8-byte magic `VITPRUNE`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header, then the
//! tensors listed in the header as raw little-endian `f32` values in header
//! order. Model tensors come first, then 2:4 keep-masks (as 0/1 values) and
//! finally AdamW moments.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchSpec, MaskSet, Vit};
use crate::optim::{AdamConfig, AdamW};
use crate::sparsity::SparsityMasks;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"VITPRUNE";
pub const VERSION: u32 = 1;

const SPARSITY_PREFIX: &str = "sparsity24/";
const ADAM_M_PREFIX: &str = "adam.m/";
const ADAM_V_PREFIX: &str = "adam.v/";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub epoch: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    arch: ArchSpec,
    masks: MaskSet,
    sparsity24: bool,
    counters: Counters,
    metrics: BTreeMap<String, f64>,
    config_hash: String,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerMeta>,
    pruner: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct OptimizerMeta {
    cfg: AdamConfig,
    step: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Vit,
    /// Keep-masks over `model`'s own extents.
    pub masks: MaskSet,
    pub sparsity: Option<SparsityMasks>,
    pub counters: Counters,
    pub metrics: BTreeMap<String, f64>,
    pub config_hash: String,
    pub optimizer: Option<AdamW>,
    pub pruner: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn new(model: Vit) -> Self {
        let masks = MaskSet::full(model.spec());
        Checkpoint {
            model,
            masks,
            sparsity: None,
            counters: Counters::default(),
            metrics: BTreeMap::new(),
            config_hash: String::new(),
            optimizer: None,
            pruner: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload: Vec<&[f32]> = Vec::new();
        let mask_vals: Vec<(String, Vec<f32>)> = self
            .sparsity
            .iter()
            .flatten()
            .map(|(n, k)| {
                (
                    n.clone(),
                    k.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
                )
            })
            .collect();
        for (l, t) in self.model.params() {
            entries.push(TensorEntry {
                name: l.name.clone(),
                shape: t.shape().to_vec(),
            });
            payload.push(t.data());
        }
        for (n, vals) in &mask_vals {
            let shape = self
                .model
                .get(n)
                .ok_or_else(|| {
                    Error::Checkpoint(format!("sparsity mask for unknown tensor `{n}`"))
                })?
                .shape()
                .to_vec();
            entries.push(TensorEntry {
                name: format!("{SPARSITY_PREFIX}{n}"),
                shape,
            });
            payload.push(vals);
        }
        if let Some(opt) = &self.optimizer {
            for (prefix, bufs) in [(ADAM_M_PREFIX, &opt.m), (ADAM_V_PREFIX, &opt.v)] {
                for ((l, _), buf) in self.model.params().zip(bufs) {
                    entries.push(TensorEntry {
                        name: format!("{prefix}{}", l.name),
                        shape: l.shape.clone(),
                    });
                    payload.push(buf);
                }
            }
        }
        let header = Header {
            version: VERSION,
            arch: self.model.spec().clone(),
            masks: self.masks.clone(),
            sparsity24: self.sparsity.is_some(),
            counters: self.counters,
            metrics: self.metrics.clone(),
            config_hash: self.config_hash.clone(),
            tensors: entries,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerMeta {
                cfg: o.cfg,
                step: o.step,
            }),
            pruner: self.pruner.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let total: usize = payload.iter().map(|p| p.len() * 4).sum();
        let mut out = Vec::with_capacity(20 + json.len() + total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in payload {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let mut data = &body[hlen..];
        let mut model_tensors = Vec::new();
        let mut sparsity = SparsityMasks::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if data.len() < n * 4 {
                return Err(Error::Checkpoint(format!(
                    "payload truncated at `{}`",
                    e.name
                )));
            }
            let vals: Vec<f32> = data[..n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            data = &data[n * 4..];
            if let Some(name) = e.name.strip_prefix(SPARSITY_PREFIX) {
                sparsity.insert(name.to_string(), vals.iter().map(|&x| x != 0.0).collect());
            } else if let Some(name) = e.name.strip_prefix(ADAM_M_PREFIX) {
                m.insert(name.to_string(), vals);
            } else if let Some(name) = e.name.strip_prefix(ADAM_V_PREFIX) {
                v.insert(name.to_string(), vals);
            } else {
                model_tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), vals)?));
            }
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after payload"));
        }
        let model = Vit::from_tensors(&header.arch, model_tensors)?;
        header.masks.check_against(model.spec())?;
        let optimizer = match header.optimizer {
            Some(meta) => {
                let take = |map: &mut BTreeMap<String, Vec<f32>>| -> Result<Vec<Vec<f32>>> {
                    model
                        .layouts()
                        .iter()
                        .map(|l| {
                            map.remove(&l.name).ok_or_else(|| {
                                Error::Checkpoint(format!(
                                    "missing optimizer state for `{}`",
                                    l.name
                                ))
                            })
                        })
                        .collect()
                };
                Some(AdamW {
                    cfg: meta.cfg,
                    step: meta.step,
                    m: take(&mut m)?,
                    v: take(&mut v)?,
                })
            }
            None => None,
        };
        Ok(Checkpoint {
            model,
            masks: header.masks,
            sparsity: header.sparsity24.then_some(sparsity),
            counters: header.counters,
            metrics: header.metrics,
            config_hash: header.config_hash,
            optimizer,
            pruner: header.pruner,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
