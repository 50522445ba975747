//! Checkpoint files: an 8-byte magic, a little-endian `u32` format version,
//! a `u64` header length, a JSON header, then every tensor as little-endian
//! `f32` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AnDaConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ANDACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Adam moments and counters, stored alongside the parameters in resumable
/// checkpoints. Moment order matches `Checkpoint::params`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub epoch: usize,
    pub best_metric: f64,
    pub stale_epochs: usize,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: AnDaConfig,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerSnapshot>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    crc32: u32,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    epoch: usize,
    best_metric: f64,
    stale_epochs: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: AnDaConfig,
    tensors: Vec<Entry>,
    optimizer: Option<OptimizerHeader>,
}

fn encode(t: &Tensor) -> Vec<u8> {
    t.data()
        .iter()
        .flat_map(|&x| (x as f32).to_le_bytes())
        .collect()
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut tensors: Vec<(String, &Tensor)> =
        ckpt.params.iter().map(|(n, t)| (n.clone(), t)).collect();
    if let Some(opt) = &ckpt.optimizer {
        if opt.first_moment.len() != ckpt.params.len()
            || opt.second_moment.len() != ckpt.params.len()
        {
            return Err(Error::contract(
                "optimizer moments do not match the parameter list",
            ));
        }
        for ((name, _), m) in ckpt.params.iter().zip(&opt.first_moment) {
            tensors.push((format!("adam.m.{name}"), m));
        }
        for ((name, _), v) in ckpt.params.iter().zip(&opt.second_moment) {
            tensors.push((format!("adam.v.{name}"), v));
        }
    }
    let blobs: Vec<Vec<u8>> = tensors.iter().map(|(_, t)| encode(t)).collect();
    let header = Header {
        config: ckpt.config.clone(),
        tensors: tensors
            .iter()
            .zip(&blobs)
            .map(|((name, t), b)| Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                crc32: crc32fast::hash(b),
            })
            .collect(),
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerHeader {
            step: o.step,
            epoch: o.epoch,
            best_metric: o.best_metric,
            stale_epochs: o.stale_epochs,
        }),
    };
    let header = serde_json::to_vec(&header)?;
    let mut bytes =
        Vec::with_capacity(20 + header.len() + blobs.iter().map(Vec::len).sum::<usize>());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for b in &blobs {
        bytes.extend_from_slice(b);
    }
    // Write then rename so a crash never leaves a half-written checkpoint.
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn corrupt(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Corruption(format!("{}: {what}", path.display()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(
            path,
            format!("unsupported format version {version}"),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if header_len > body.len() {
        return Err(corrupt(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])
        .map_err(|e| corrupt(path, format!("bad header: {e}")))?;
    let mut data = &body[header_len..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        if data.len() < 4 * n {
            return Err(corrupt(path, format!("truncated data for `{}`", e.name)));
        }
        let (blob, rest) = data.split_at(4 * n);
        data = rest;
        if crc32fast::hash(blob) != e.crc32 {
            return Err(corrupt(path, format!("checksum mismatch for `{}`", e.name)));
        }
        let values = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(e.shape, values)
            .map_err(|_| corrupt(path, format!("bad shape for `{}`", e.name)))?;
        tensors.push((e.name, t));
    }
    if !data.is_empty() {
        return Err(corrupt(path, "trailing bytes after the last tensor"));
    }
    header.config.validate()?;

    let (mut params, mut m, mut v) = (vec![], vec![], vec![]);
    for (name, t) in tensors {
        if name.starts_with("adam.m.") {
            m.push(t);
        } else if name.starts_with("adam.v.") {
            v.push(t);
        } else {
            params.push((name, t));
        }
    }
    let optimizer = match header.optimizer {
        Some(o) => {
            if m.len() != params.len() || v.len() != params.len() {
                return Err(corrupt(
                    path,
                    "optimizer moments do not match the parameter list",
                ));
            }
            Some(OptimizerSnapshot {
                step: o.step,
                epoch: o.epoch,
                best_metric: o.best_metric,
                stale_epochs: o.stale_epochs,
                first_moment: m,
                second_moment: v,
            })
        }
        None => None,
    };
    Ok(Checkpoint {
        config: header.config,
        params,
        optimizer,
    })
}

/// Fails with the first differing field when `found` and `expected` disagree
/// on anything that affects parameter shapes or the forward pass.
pub fn check_config(found: &AnDaConfig, expected: &AnDaConfig) -> Result<()> {
    let a = serde_json::to_value(found)?;
    let b = serde_json::to_value(expected)?;
    let (serde_json::Value::Object(a), serde_json::Value::Object(b)) = (a, b) else {
        unreachable!("configs serialise to objects");
    };
    for (k, va) in &a {
        let vb = &b[k];
        if va != vb {
            return Err(Error::ConfigMismatch {
                field: k.clone(),
                found: va.to_string(),
                expected: vb.to_string(),
            });
        }
    }
    Ok(())
}
