//! Model checkpoints, dataset caches and CSV reports.

use std::path::Path;

use super::data::{ToyDataset, ToyDatasetConfig, VideoSample};
use super::experiment::AblationRow;
use super::model::{ModelKind, TinyModel};
use super::train::EpochRecord;
use crate::error::{Error, Result};
use crate::io::{
    atomic_write, csv_bytes, load_conv, load_count, load_layer, store_conv, store_layer, Checkpoint,
};
use crate::tensor::{FeatureMap, PaddingSpec};

const KINDS: [ModelKind; 3] = [ModelKind::Flow, ModelKind::Fcf, ModelKind::Appearance];

impl TinyModel {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        let kind = KINDS
            .iter()
            .position(|k| *k == self.kind)
            .expect("listed kind");
        ck.insert_scalar("model.kind", kind as f64)?;
        store_conv(&mut ck, "stage_a", &self.stage_a)?;
        store_layer(&mut ck, "flow", &self.flow)?;
        if let Some(mid) = &self.mid {
            store_conv(&mut ck, "mid", mid)?;
        }
        if let Some(b) = &self.flow_b {
            store_layer(&mut ck, "flow_b", b)?;
        }
        store_conv(&mut ck, "stage_b", &self.stage_b)?;
        store_conv(&mut ck, "classifier", &self.classifier)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let kind = *KINDS
            .get(load_count(ck, "model.kind")?)
            .ok_or_else(|| Error::malformed("checkpoint", "unknown model.kind"))?;
        let same = PaddingSpec::replicate(1);
        let (mid, flow_b) = if kind == ModelKind::Fcf {
            (
                Some(load_conv(ck, "mid", same)?),
                Some(load_layer(ck, "flow_b")?),
            )
        } else {
            (None, None)
        };
        let model = TinyModel {
            kind,
            stage_a: load_conv(ck, "stage_a", same)?,
            flow: load_layer(ck, "flow")?,
            mid,
            flow_b,
            stage_b: load_conv(ck, "stage_b", same)?,
            classifier: load_conv(ck, "classifier", PaddingSpec::NONE)?,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Generator settings a cache was built from; a cache only serves the same key.
fn cache_key(cfg: &ToyDatasetConfig, seed: u64) -> Vec<f64> {
    [
        seed >> 32,
        seed & 0xffff_ffff,
        cfg.num_classes as u64,
        cfg.train_per_class as u64,
        cfg.test_per_class as u64,
        cfg.frames as u64,
        cfg.size as u64,
        cfg.channels as u64,
        cfg.min_speed as u64,
        cfg.max_speed as u64,
        cfg.distractor as u64,
    ]
    .map(|v| v as f64)
    .to_vec()
}

fn store_split(
    ck: &mut Checkpoint,
    name: &str,
    samples: &[VideoSample],
    cfg: &ToyDatasetConfig,
) -> Result<()> {
    let dims = [samples.len(), cfg.frames, cfg.channels, cfg.size, cfg.size];
    let mut data = Vec::with_capacity(dims.iter().product());
    for s in samples {
        for f in &s.frames {
            data.extend_from_slice(f.data());
        }
    }
    ck.insert(format!("data.{name}.frames"), &dims, data)?;
    ck.insert(
        format!("data.{name}.labels"),
        &[samples.len()],
        samples.iter().map(|s| s.label as f64).collect(),
    )
}

fn load_split(
    ck: &Checkpoint,
    name: &str,
    n: usize,
    cfg: &ToyDatasetConfig,
) -> Result<Vec<VideoSample>> {
    let (t, c, s) = (cfg.frames, cfg.channels, cfg.size);
    let frames = ck.expect(&format!("data.{name}.frames"), &[n, t, c, s, s])?;
    let labels = ck.expect(&format!("data.{name}.labels"), &[n])?;
    let per = c * s * s;
    (0..n)
        .map(|i| {
            let label = labels[i];
            if !(label >= 0.0 && label.fract() == 0.0 && (label as usize) < cfg.num_classes) {
                return Err(Error::malformed("dataset cache", format!("label {label}")));
            }
            let frames = (0..t)
                .map(|k| {
                    let at = (i * t + k) * per;
                    FeatureMap::new(c, s, s, frames[at..at + per].to_vec())
                })
                .collect::<Result<_>>()?;
            Ok(VideoSample {
                frames,
                label: label as usize,
            })
        })
        .collect()
}

pub fn dataset_to_checkpoint(
    data: &ToyDataset,
    cfg: &ToyDatasetConfig,
    seed: u64,
) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.insert("data.key", &[11], cache_key(cfg, seed))?;
    store_split(&mut ck, "train", &data.train, cfg)?;
    store_split(&mut ck, "test", &data.test, cfg)?;
    Ok(ck)
}

/// Rejects caches built from a different config or seed.
pub fn dataset_from_checkpoint(
    ck: &Checkpoint,
    cfg: &ToyDatasetConfig,
    seed: u64,
) -> Result<ToyDataset> {
    if ck.expect("data.key", &[11])? != cache_key(cfg, seed).as_slice() {
        return Err(Error::invalid(
            "dataset cache was built from a different config or seed",
        ));
    }
    let k = cfg.num_classes;
    Ok(ToyDataset {
        train: load_split(ck, "train", k * cfg.train_per_class, cfg)?,
        test: load_split(ck, "test", k * cfg.test_per_class, cfg)?,
    })
}

pub fn history_csv(history: &[EpochRecord]) -> Result<Vec<u8>> {
    csv_bytes(history)
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<Vec<u8>> {
    csv_bytes(rows)
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    atomic_write(path, &history_csv(history)?)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    atomic_write(path, &ablation_csv(rows)?)
}
