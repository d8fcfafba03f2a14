//! Directory checkpoints: `manifest.json` plus one binary blob per parameter.
//!
//! A blob is the parameter's rank as a little-endian `u64`, then each
//! dimension as `u64`, then the values as little-endian `f32`.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::AdamConfig;
use super::config::TrainConfig;
use super::policy::{ParamLedger, TrainingPolicy};
use crate::dataset::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{GroundingModel, Group, ModelConfig};
use crate::nn::Param;

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
const PARAMS_DIR: &str = "params";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub vocabulary: Vocabulary,
    pub seed: u64,
    pub policy: Option<TrainingPolicy>,
    pub adapter_rank: Option<usize>,
    pub train: Option<TrainConfig>,
    pub optimizer: Option<AdamConfig>,
    /// Dataset the model was trained on, if known.
    pub data_root: Option<PathBuf>,
    pub epoch: Option<usize>,
    pub trainable_params: usize,
    pub frozen_params: usize,
    pub params: Vec<ParamRecord>,
}

/// What a caller knows about the run that produced a model.
#[derive(Debug, Clone, Default)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub policy: Option<TrainingPolicy>,
    pub train: Option<TrainConfig>,
    pub data_root: Option<PathBuf>,
    pub epoch: Option<usize>,
}

fn blob_name(param: &str) -> String {
    format!("{param}.bin")
}

fn encode_blob(p: &Param) -> Result<Vec<u8>> {
    let dims = p.dims();
    let values = p
        .value()
        .to_dtype(candle_core::DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let mut out = Vec::with_capacity(8 * (dims.len() + 1) + 4 * values.len());
    out.extend_from_slice(&(dims.len() as u64).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn decode_blob(bytes: &[u8], name: &str, path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let corrupt = |reason: String| Error::Load {
        path: path.to_owned(),
        reason: format!("parameter `{name}`: {reason}"),
    };
    let word = |i: usize| -> Result<u64> {
        bytes
            .get(8 * i..8 * i + 8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("eight bytes")))
            .ok_or_else(|| corrupt("truncated shape header".into()))
    };
    let rank = word(0)? as usize;
    if rank > 8 {
        return Err(corrupt(format!("implausible rank {rank}")));
    }
    let dims = (1..=rank)
        .map(|i| word(i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 8 * (rank + 1);
    let count: usize = dims.iter().product();
    if bytes.len() != header + 4 * count {
        return Err(corrupt(format!(
            "shape {dims:?} needs {} data bytes, blob has {}",
            4 * count,
            bytes.len() - header
        )));
    }
    let values = bytes[header..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")))
        .collect();
    Ok((dims, values))
}

pub fn save_checkpoint(model: &GroundingModel, meta: &CheckpointMeta, dir: &Path) -> Result<CheckpointManifest> {
    let params_dir = dir.join(PARAMS_DIR);
    fs::create_dir_all(&params_dir).map_err(|e| Error::io(&params_dir, e))?;
    let mut records = Vec::new();
    let mut failure = None;
    model.visit_groups(&mut |group, p| {
        if failure.is_some() {
            return;
        }
        let res = (|| -> Result<ParamRecord> {
            let bytes = encode_blob(p)?;
            let file = format!("{PARAMS_DIR}/{}", blob_name(p.name()));
            let path = dir.join(&file);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            Ok(ParamRecord {
                name: p.name().to_owned(),
                group,
                shape: p.dims().to_vec(),
                trainable: p.trainable(),
                file,
                sha256: hex::encode(Sha256::digest(&bytes)),
            })
        })();
        match res {
            Ok(r) => records.push(r),
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let ledger = ParamLedger::from_model(model);
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        model: model.config().clone(),
        vocabulary: model.vocabulary().clone(),
        seed: meta.seed,
        policy: meta.policy,
        adapter_rank: model.config().adapter.map(|a| a.rank),
        train: meta.train.clone(),
        optimizer: meta.train.as_ref().map(TrainConfig::optimizer),
        data_root: meta.data_root.clone(),
        epoch: meta.epoch,
        trainable_params: ledger.trainable,
        frozen_params: ledger.frozen,
        params: records,
    };
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::Load {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Load {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Load {
            path,
            reason: format!("unsupported format version {}", manifest.format_version),
        });
    }
    Ok(manifest)
}

/// Rebuilds the model described by the manifest and fills in its weights.
pub fn load_checkpoint(dir: &Path) -> Result<(GroundingModel, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let mut model = GroundingModel::new(manifest.model.clone(), manifest.vocabulary.clone(), manifest.seed)?;
    load_weights_into(&mut model, &manifest, dir)?;
    Ok((model, manifest))
}

/// Overwrites every parameter of `model` from the checkpoint at `dir`,
/// restoring trainable flags.
///
/// Blob structure is checked first (load error), then the manifest checksum
/// (integrity error), then the shape against `model` (shape error).
pub fn load_weights_into(model: &mut GroundingModel, manifest: &CheckpointManifest, dir: &Path) -> Result<()> {
    let mut failure = None;
    model.visit_groups_mut(&mut |_, p| {
        if failure.is_some() {
            return;
        }
        if let Err(e) = load_param(p, manifest, dir) {
            failure = Some(e);
        }
    });
    failure.map_or(Ok(()), Err)
}

fn load_param(p: &mut Param, manifest: &CheckpointManifest, dir: &Path) -> Result<()> {
    let record = manifest
        .params
        .iter()
        .find(|r| r.name == p.name())
        .ok_or_else(|| Error::Load {
            path: dir.join(CHECKPOINT_MANIFEST),
            reason: format!("parameter `{}` is missing from the manifest", p.name()),
        })?;
    let path = dir.join(&record.file);
    let bytes = fs::read(&path).map_err(|e| Error::Load {
        path: path.clone(),
        reason: format!("parameter `{}`: {e}", p.name()),
    })?;
    let (dims, values) = decode_blob(&bytes, p.name(), &path)?;
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != record.sha256 {
        return Err(Error::Integrity {
            param: p.name().to_owned(),
            reason: format!("blob sha256 {digest} does not match manifest {}", record.sha256),
        });
    }
    if dims != p.dims() {
        return Err(Error::Shape(format!(
            "parameter `{}`: checkpoint shape {dims:?}, model shape {:?}",
            p.name(),
            p.dims()
        )));
    }
    let t = Tensor::from_vec(values, dims.as_slice(), &Device::Cpu)?;
    p.set(&t)?;
    p.set_trainable(record.trainable);
    Ok(())
}
