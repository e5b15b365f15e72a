//! Single-file checkpoint: magic, manifest length (u64 LE), JSON manifest,
//! then every array as little-endian f32 in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Model;
use crate::blob;
use crate::config::{hex, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ParamGroup;
use crate::real::Real;
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"PETDUET1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    group: Option<ParamGroup>,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    config_hash: String,
    params: Vec<Entry>,
    extras: Vec<Entry>,
    meta: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<(String, Matrix<f32>)>,
    /// Auxiliary arrays such as optimizer moments.
    pub extras: Vec<(String, Matrix<f32>)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    /// Rebuilds the model from the stored config and overwrites every
    /// parameter by name.
    pub fn into_model<T: Real>(&self) -> Result<Model<T>> {
        let mut model = Model::<T>::new(self.config.clone())?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    pub fn load_into<T: Real>(&self, model: &mut Model<T>) -> Result<()> {
        if model.cfg.hash() != self.config.hash() {
            return Err(Error::Config(
                "checkpoint was written for a different model configuration".into(),
            ));
        }
        if self.params.len() != model.store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, m) in &self.params {
            let id = model
                .store
                .id(name)
                .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
            let dst = model.store.value_mut(id);
            if dst.shape() != m.shape() {
                return Err(Error::Shape(format!("parameter {name}: {:?} vs {:?}", dst.shape(), m.shape())));
            }
            *dst = m.cast();
        }
        Ok(())
    }

    pub fn extra(&self, name: &str) -> Option<&Matrix<f32>> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }
}

/// Writes the archive and returns its sha256.
pub fn save_checkpoint<T: Real>(
    path: &Path,
    model: &Model<T>,
    extras: &[(String, Matrix<f32>)],
    meta: serde_json::Value,
) -> Result<String> {
    let mut params = Vec::with_capacity(model.store.len());
    let mut payload: Vec<f32> = Vec::with_capacity(model.store.num_scalars());
    for (_, p) in model.store.iter() {
        params.push(Entry {
            name: p.name.clone(),
            group: Some(p.group),
            rows: p.value.rows,
            cols: p.value.cols,
        });
        payload.extend(p.value.data.iter().map(|v| v.f64() as f32));
    }
    let mut extra_entries = Vec::with_capacity(extras.len());
    for (name, m) in extras {
        extra_entries.push(Entry {
            name: name.clone(),
            group: None,
            rows: m.rows,
            cols: m.cols,
        });
        payload.extend_from_slice(&m.data);
    }
    let manifest = Manifest {
        config: model.cfg.clone(),
        config_hash: model.cfg.hash(),
        params,
        extras: extra_entries,
        meta,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut bytes = Vec::with_capacity(16 + json.len() + payload.len() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&blob::f32_to_le(&payload));
    blob::write_bytes(path, &bytes)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a checkpoint archive"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + n)
        .ok_or_else(|| Error::format(path, "truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| Error::format(path, e.to_string()))?;
    if manifest.config.hash() != manifest.config_hash {
        return Err(Error::format(path, "config hash does not match stored config"));
    }
    let data = blob::le_to_f32(&bytes[16 + n..]).ok_or_else(|| Error::format(path, "payload misaligned"))?;
    let mut off = 0;
    let mut take = |entries: &[Entry]| -> Result<Vec<(String, Matrix<f32>)>> {
        entries
            .iter()
            .map(|e| {
                let len = e.rows * e.cols;
                let slice = data
                    .get(off..off + len)
                    .ok_or_else(|| Error::format(path, format!("payload too short for {}", e.name)))?;
                off += len;
                Ok((e.name.clone(), Matrix::from_vec(e.rows, e.cols, slice.to_vec())))
            })
            .collect()
    };
    let params = take(&manifest.params)?;
    let extras = take(&manifest.extras)?;
    if off != data.len() {
        return Err(Error::format(path, "trailing payload bytes"));
    }
    Ok(Checkpoint {
        config: manifest.config,
        params,
        extras,
        meta: manifest.meta,
    })
}
