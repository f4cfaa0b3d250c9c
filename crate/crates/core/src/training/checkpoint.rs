//! Single-file checkpoints.
//!
//! Layout: magic line, `u32` format version, `u64` metadata length, JSON
//! metadata (config, vocabularies, parameter names and shapes), the
//! parameters as little-endian `f64` blobs in metadata order, and a trailing
//! SHA-256 over everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::nn;

use super::{Model, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8] = b"TOPICSUM-CKPT\n";

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: TrainConfig,
    vocab: Vocabulary,
    params: Vec<ParamEntry>,
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let meta = Metadata {
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        params: model
            .store
            .iter()
            .map(|(name, v)| ParamEntry {
                name: name.to_string(),
                shape: v.dims().to_vec(),
            })
            .collect(),
    };
    let meta = serde_json::to_vec(&meta)?;
    let mut buf = Vec::with_capacity(MAGIC.len() + 12 + meta.len() + 8 * model.store.num_scalars() + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    for (_, v) in model.store.iter() {
        for x in nn::to_vec(v.as_tensor())? {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, buf)?;
    Ok(())
}

fn take<'a>(data: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= data.len())
        .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
    let out = &data[*pos..end];
    *pos = end;
    Ok(out)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let data = std::fs::read(path)?;
    if data.len() < MAGIC.len() + 12 + 32 || !data.starts_with(MAGIC) {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let mut pos = MAGIC.len();
    let version = u32::from_le_bytes(take(&data, &mut pos, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, digest) = data.split_at(data.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch (corrupted file)".into()));
    }
    let meta_len = u64::from_le_bytes(take(body, &mut pos, 8)?.try_into().unwrap()) as usize;
    let meta: Metadata = serde_json::from_slice(take(body, &mut pos, meta_len)?)?;
    let model = Model::new(meta.config, meta.vocab)?;
    if meta.params.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "{} stored parameters, model has {}",
            meta.params.len(),
            model.store.len()
        )));
    }
    for entry in &meta.params {
        let var = model
            .store
            .get(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", entry.name)))?;
        if var.dims() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?}, model expects {:?}",
                entry.name,
                entry.shape,
                var.dims()
            )));
        }
        let n: usize = entry.shape.iter().product();
        let raw = take(body, &mut pos, 8 * n)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        var.set(&candle_core::Tensor::from_vec(values, entry.shape.as_slice(), &nn::device())?)?;
    }
    if pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok(model)
}
