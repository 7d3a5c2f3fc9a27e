//! Binary tensor archive and model checkpoints.
//!
//! Layout: magic `CMANPARC`, `u32` format version, `u64` header length,
//! JSON header (user metadata plus a manifest of name/shape/offset), the
//! tensors as little-endian `f64`, then a SHA-256 of everything before it.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Tensor};

const MAGIC: &[u8; 8] = b"CMANPARC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// In `f64` elements from the start of the data section.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    entries: Vec<Entry>,
}

/// Named tensors plus a JSON header.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            entries,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + offset * 8 + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 8 + 4 + 8 + 32 {
            return Err(corrupt("file too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified)"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let data_start = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("header overruns file"))?;
        let header: Header = serde_json::from_slice(&body[20..data_start])?;
        let data = &body[data_start..];
        if data.len() % 8 != 0 {
            return Err(corrupt("data section not a whole number of f64"));
        }
        let floats = data.len() / 8;
        let mut tensors = Vec::with_capacity(header.entries.len());
        for e in header.entries {
            let n: usize = e.shape.iter().product();
            if e.offset + n > floats {
                return Err(corrupt(&format!("tensor {} overruns data", e.name)));
            }
            let v = data[e.offset * 8..(e.offset + n) * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&e.shape, v).map_err(|_| corrupt(&format!("tensor {} holds non-finite values", e.name)))?;
            tensors.push((e.name, t));
        }
        Ok(Archive {
            meta: header.meta,
            tensors,
        })
    }

    /// Writes via a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Archive::from_bytes(&fs::read(path)?, path)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    step: u64,
    adam: Option<(AdamConfig, u64)>,
    extra: serde_json::Value,
}

/// Model weights, training position and optional optimizer moments.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: ModelParams,
    pub adam: Option<AdamState>,
    /// Free-form metadata (training configuration, provenance of the run).
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64, adam: Option<AdamState>, extra: serde_json::Value) -> Self {
        Checkpoint {
            config: *model.config(),
            step,
            params: model.params().clone(),
            adam,
            extra,
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(self.config, self.params.clone())
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let named = ck.params.tensors();
    let mut tensors: Vec<(String, Tensor)> = named.iter().map(|(n, t)| (n.clone(), (*t).clone())).collect();
    if let Some(a) = &ck.adam {
        for (i, (n, _)) in named.iter().enumerate() {
            tensors.push((format!("adam.m.{n}"), a.m[i].clone()));
        }
        for (i, (n, _)) in named.iter().enumerate() {
            tensors.push((format!("adam.v.{n}"), a.v[i].clone()));
        }
    }
    let meta = CheckpointMeta {
        config: ck.config,
        step: ck.step,
        adam: ck.adam.as_ref().map(|a| (a.config, a.step)),
        extra: ck.extra.clone(),
    };
    Archive {
        meta: serde_json::to_value(meta)?,
        tensors,
    }
    .save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ar = Archive::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(ar.meta.clone())?;
    let template = ModelParams::init(&meta.config, 0)?;
    let missing = |name: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: format!("missing tensor {name}"),
    };
    let names: Vec<String> = template.tensors().into_iter().map(|(n, _)| n).collect();
    let fetch = |prefix: &str| -> Result<Vec<Tensor>> {
        names
            .iter()
            .map(|n| {
                let key = format!("{prefix}{n}");
                ar.get(&key).cloned().ok_or_else(|| missing(&key))
            })
            .collect()
    };
    let params = template.with_tensors(fetch("")?)?;
    let adam = match meta.adam {
        None => None,
        Some((config, step)) => Some(AdamState {
            config,
            step,
            m: fetch("adam.m.")?,
            v: fetch("adam.v.")?,
        }),
    };
    Ok(Checkpoint {
        config: meta.config,
        step: meta.step,
        params,
        adam,
        extra: meta.extra,
    })
}
