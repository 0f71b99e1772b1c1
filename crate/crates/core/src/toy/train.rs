use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::VideoSample;
use super::model::{cross_entropy, ModelGrads, ModelMomentum, TinyModel};
use crate::error::{Error, Result};
use crate::layer::Sgd;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    pub flow_lr_scale: f64,
    /// seeds the per-epoch sample order
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            epochs: 30,
            batch: 8,
            flow_lr_scale: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn sgd(&self) -> Sgd {
        Sgd {
            lr: self.lr,
            momentum: self.momentum,
            flow_lr_scale: self.flow_lr_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.flow_lr_scale >= 0.0 && self.flow_lr_scale.is_finite()) {
            return Err(Error::invalid("flow_lr_scale must be finite and >= 0"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One row of the training history. Train rows average over the epoch's
/// batches as they were seen; test rows evaluate the model at epoch end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(model: &TinyModel, data: &[VideoSample]) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Empty("evaluate"));
    }
    let k = model.num_classes();
    let mut confusion = vec![vec![0usize; k]; k];
    let mut loss = 0.0;
    for s in data {
        let p = model.predict(s)?;
        loss += cross_entropy(&p, s.label)?;
        confusion[s.label][argmax(&p)] += 1;
    }
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        mean_loss: loss / data.len() as f64,
        confusion,
    })
}

/// Mini-batch SGD with momentum. Returns one train row per epoch, plus a test
/// row when `test` is non-empty. A non-finite loss, or an update that leaves a
/// parameter non-finite or out of its domain, aborts with the index of the
/// offending optimizer step.
pub fn train(
    model: &mut TinyModel,
    data: &[VideoSample],
    test: &[VideoSample],
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("train"));
    }
    model.validate()?;
    let sgd = cfg.sgd();
    let mut state = ModelMomentum::zeros_like(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::new();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch) {
            let mut grads = ModelGrads::zeros_like(model);
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = &data[i];
                let pass = model.forward(s)?;
                let loss = cross_entropy(&pass.probs, s.label)?;
                if !loss.is_finite() || pass.probs.iter().any(|p| !p.is_finite()) {
                    return Err(Error::Diverged { step, loss });
                }
                loss_sum += loss;
                correct += usize::from(argmax(&pass.probs) == s.label);
                grads.accumulate(&model.backward(&pass, s.label, weight)?);
            }
            model.step(&grads, &sgd, &mut state)?;
            if !model.params_valid() {
                return Err(Error::Diverged {
                    step,
                    loss: f64::NAN,
                });
            }
            step += 1;
        }
        let n = data.len() as f64;
        history.push(EpochRecord {
            epoch,
            split: Split::Train,
            loss: loss_sum / n,
            accuracy: correct as f64 / n,
        });
        if !test.is_empty() {
            let e = evaluate(model, test)?;
            history.push(EpochRecord {
                epoch,
                split: Split::Test,
                loss: e.mean_loss,
                accuracy: e.accuracy,
            });
        }
    }
    Ok(history)
}
