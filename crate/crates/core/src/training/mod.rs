//! Policies, parameter accounting, the optimizer, checkpoints, and the
//! epoch loop.

mod adam;
mod checkpoint;
mod config;
mod policy;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{
    load_checkpoint, load_weights_into, read_manifest, save_checkpoint, CheckpointManifest, CheckpointMeta,
    ParamRecord, CHECKPOINT_MANIFEST,
};
pub use config::{TrainConfig, ViewSetting};
pub use policy::{apply_policy, GroupSummary, LedgerEntry, ParamLedger, PolicyKind, TrainingPolicy};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{GroundingDataset, ReferenceRecord, Split};
use crate::error::{Error, Result};
use crate::evaluation::evaluate_cached;
use crate::head::EncoderToggles;
use crate::model::{FeatureCache, GroundingModel, LossSettings, ModelConfig};
use crate::nn::{scalar, Parameters};

/// Longest token sequence (BOS and EOS included) fed to the language encoder.
pub const MAX_TOKENS: usize = 16;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_DIR: &str = "final";
pub const BEST_DIR: &str = "best";

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_lgr: f64,
    pub loss_vlc: Option<f64>,
    pub loss_vgc: Option<f64>,
    pub loss_total: f64,
    pub val_acc_all: Option<f64>,
    pub val_acc_visual: Option<f64>,
    pub val_acc_blind: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub lgr: f64,
    pub vlc: Option<f64>,
    pub vgc: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where metrics and checkpoints go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Recorded in checkpoint manifests.
    pub data_root: Option<PathBuf>,
    /// Skip per-epoch validation.
    pub skip_validation: bool,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub ledger: ParamLedger,
}

/// Desk-scale model sized for `dataset`, with trainable flags set by the
/// config's policy.
pub fn build_model(
    dataset: &GroundingDataset,
    config: &TrainConfig,
    toggles: EncoderToggles,
) -> Result<GroundingModel> {
    config.validate()?;
    let vocab = dataset.vocabulary()?;
    let (w, h) = dataset
        .image_dims()
        .ok_or_else(|| Error::Argument("dataset has no objects".into()))?;
    if w != h {
        return Err(Error::Config(format!("encoders need square views, got {w}x{h}")));
    }
    let mut mc = ModelConfig::desk(w, vocab.size(), MAX_TOKENS).with_prefix_tokens(config.prefix_tokens);
    mc.adapter = Some(config.adapter());
    mc.toggles = toggles;
    let mut model = GroundingModel::new(mc, vocab, config.seed)?;
    apply_policy(&mut model, &config.policy())?;
    Ok(model)
}

/// Loss terms and one optimizer step on a batch.
pub fn train_step(
    model: &GroundingModel,
    cache: &FeatureCache,
    batch: &[&ReferenceRecord],
    settings: &LossSettings,
    optimizer: &mut Adam,
    epoch: usize,
    batch_index: usize,
) -> Result<StepLosses> {
    let l = model.batch_losses(cache, batch, settings)?;
    let value = |t: &Option<candle_core::Tensor>| t.as_ref().map(scalar).transpose();
    let step = StepLosses {
        lgr: scalar(&l.lgr)?,
        vlc: value(&l.vlc)?,
        vgc: value(&l.vgc)?,
        total: scalar(&l.total)?,
    };
    let finite = [Some(step.lgr), step.vlc, step.vgc, Some(step.total)]
        .iter()
        .flatten()
        .all(|v| v.is_finite());
    if !finite {
        return Err(Error::NonFinite {
            epoch,
            batch: batch_index,
            terms: format!(
                "lgr={} vlc={:?} vgc={:?} total={}",
                step.lgr, step.vlc, step.vgc, step.total
            ),
        });
    }
    let grads = l.total.backward()?;
    optimizer.step(&model.params(), &grads)?;
    Ok(step)
}

/// Runs the epoch loop. Serial and deterministic for a fixed seed.
pub fn train(
    model: &mut GroundingModel,
    dataset: &GroundingDataset,
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<TrainReport> {
    config.validate()?;
    let ledger = ParamLedger::from_model(model);
    let cache = FeatureCache::build(model, dataset, config.view_mode())?;
    let train_refs = dataset.split(Split::Train);
    if train_refs.is_empty() {
        return Err(Error::Argument("dataset has no training references".into()));
    }
    let val_refs = dataset.split(Split::Validation);
    let settings = config.losses();
    let mut optimizer = Adam::new(config.optimizer());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut metrics_file = match &options.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let meta = |epoch| CheckpointMeta {
        seed: config.seed,
        policy: Some(config.policy()),
        train: Some(config.clone()),
        data_root: options.data_root.clone(),
        epoch: Some(epoch),
    };

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize)> = None;
    let mut order: Vec<usize> = (0..train_refs.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0f64; 4];
        let mut counts = [0usize; 4];
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&ReferenceRecord> = idx.iter().map(|&i| train_refs[i]).collect();
            let s = train_step(model, &cache, &batch, &settings, &mut optimizer, epoch, b)?;
            for (k, v) in [Some(s.lgr), s.vlc, s.vgc, Some(s.total)].into_iter().enumerate() {
                if let Some(v) = v {
                    sums[k] += v;
                    counts[k] += 1;
                }
            }
        }
        let mean = |k: usize| (counts[k] > 0).then(|| sums[k] / counts[k] as f64);
        let card = if options.skip_validation || val_refs.is_empty() {
            None
        } else {
            Some(evaluate_cached(model, &cache, &val_refs, "validation")?)
        };
        let m = EpochMetrics {
            epoch,
            loss_lgr: mean(0).unwrap_or(f64::NAN),
            loss_vlc: mean(1),
            loss_vgc: mean(2),
            loss_total: mean(3).unwrap_or(f64::NAN),
            val_acc_all: card.as_ref().map(|c| c.all.accuracy),
            val_acc_visual: card.as_ref().and_then(|c| c.visual.accuracy_opt()),
            val_acc_blind: card.as_ref().and_then(|c| c.blind.accuracy_opt()),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (lgr {:.4}) val {:?}",
            m.loss_total,
            m.loss_lgr,
            m.val_acc_all
        );
        if let Some((file, path)) = &mut metrics_file {
            let line = serde_json::to_string(&m)? + "\n";
            file.write_all(line.as_bytes()).map_err(|e| Error::io(&*path, e))?;
        }
        let score = m.val_acc_all.unwrap_or(f64::NEG_INFINITY);
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, epoch));
            if let Some(dir) = &options.out_dir {
                save_checkpoint(model, &meta(epoch), &dir.join(BEST_DIR))?;
            }
        }
        history.push(m);
    }
    if let Some(dir) = &options.out_dir {
        save_checkpoint(model, &meta(config.epochs), &dir.join(FINAL_DIR))?;
        write_json(&dir.join("ledger.json"), &ledger)?;
    }
    Ok(TrainReport {
        history,
        best_epoch: best.map_or(config.epochs, |(_, e)| e),
        ledger,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthSpec};
    use crate::model::Group;

    fn data() -> GroundingDataset {
        generate_synthetic(&SynthSpec {
            seed: 2,
            n_objects: 6,
            n_references: 24,
            image_size: 16,
            views: 2,
            visual_fraction: 0.5,
            vocabulary: Vec::new(),
        })
        .unwrap()
    }

    fn config() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs: 2,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn desk_policy_counts() {
        let d = data();
        let mut counts = Vec::new();
        for kind in PolicyKind::ALL {
            let c = TrainConfig {
                policy: kind,
                ..config()
            };
            let model = build_model(&d, &c, EncoderToggles::default()).unwrap();
            let ledger = ParamLedger::from_model(&model);
            assert_eq!(ledger.trainable + ledger.frozen, ledger.total);
            assert_eq!(ledger.group(Group::VisionEncoder).unwrap().trainable, 0);
            assert_eq!(ledger.group(Group::CaptionDecoder).unwrap().trainable, 0);
            counts.push(ledger.encoder_trainable());
        }
        assert_eq!(counts[0], 0);
        assert_eq!(counts[1], 4 * 3 * 2 * 64 * 4);
        assert!(counts[1] < counts[2] && counts[2] < counts[3]);
    }

    #[test]
    fn partial_layer_bounds() {
        let d = data();
        let mut model = build_model(&d, &config(), EncoderToggles::default()).unwrap();
        let bad = TrainingPolicy {
            kind: PolicyKind::Partial,
            partial_layers: 9,
        };
        assert!(matches!(apply_policy(&mut model, &bad), Err(Error::Config(_))));
        let mut merged = model.merged().unwrap();
        assert!(matches!(
            apply_policy(&mut merged, &TrainingPolicy::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn short_run_writes_logs_and_checkpoints() {
        let d = data();
        let dir = tempfile::tempdir().unwrap();
        let mut model = build_model(&d, &config(), EncoderToggles::default()).unwrap();
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_owned()),
            ..TrainOptions::default()
        };
        let report = train(&mut model, &d, &config(), &opts).unwrap();
        assert_eq!(report.history.len(), 2);
        let log = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(log.lines().count(), 2);
        assert!(dir.path().join(FINAL_DIR).join(CHECKPOINT_MANIFEST).exists());
        assert!(dir.path().join(BEST_DIR).join(CHECKPOINT_MANIFEST).exists());
        let (back, manifest) = load_checkpoint(&dir.path().join(FINAL_DIR)).unwrap();
        assert_eq!(manifest.policy, Some(TrainingPolicy::default()));
        let a: Vec<_> = model.params().iter().map(|p| p.checksum().unwrap()).collect();
        let b: Vec<_> = back.params().iter().map(|p| p.checksum().unwrap()).collect();
        assert_eq!(a, b);
    }
}
