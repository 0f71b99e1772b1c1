//! A full run (data, model, training, evaluation) and ablations over it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{gen_motion_dataset, ToyDataset, ToyDatasetConfig};
use super::model::{ModelConfig, ModelKind, TinyModel};
use super::train::{evaluate, train, EpochRecord, Evaluation, TrainConfig};
use crate::error::{Error, Result};
use crate::layer::LearnFlags;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// seeds the dataset and the model initialization
    pub seed: u64,
    pub data: ToyDatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Model config with class and channel counts taken from the data config.
    pub fn resolved_model(&self) -> ModelConfig {
        ModelConfig {
            num_classes: self.data.num_classes,
            in_channels: self.data.channels,
            ..self.model.clone()
        }
    }

    pub fn init_model(&self) -> Result<TinyModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(7);
        TinyModel::new(&self.resolved_model(), &mut rng)
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub initial: TinyModel,
    pub model: TinyModel,
    pub history: Vec<EpochRecord>,
    pub test: Evaluation,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let data = gen_motion_dataset(&cfg.data, cfg.seed)?;
    run_on(cfg, &data)
}

/// Like [`run_experiment`] on an already generated dataset.
pub fn run_on(cfg: &ExperimentConfig, data: &ToyDataset) -> Result<ExperimentResult> {
    let initial = cfg.init_model()?;
    let mut model = initial.clone();
    let history = train(&mut model, &data.train, &data.test, &cfg.train)?;
    let test = evaluate(&model, &data.test)?;
    Ok(ExperimentResult {
        initial,
        model,
        history,
        test,
    })
}

/// Learn-flag rows in the order of the usual comparison table.
pub const LEARN_PRESETS: [(&str, LearnFlags); 6] = [
    ("none", LearnFlags::NONE),
    (
        "sobel",
        LearnFlags {
            sobel: true,
            divergence: false,
            scalars: false,
        },
    ),
    (
        "divergence",
        LearnFlags {
            sobel: false,
            divergence: true,
            scalars: false,
        },
    ),
    (
        "scalars",
        LearnFlags {
            sobel: false,
            divergence: false,
            scalars: true,
        },
    ),
    ("all", LearnFlags::ALL),
    ("divergence+scalars", LearnFlags::DIVERGENCE_AND_SCALARS),
];

pub fn learn_preset(name: &str) -> Option<LearnFlags> {
    LEARN_PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, f)| *f)
}

#[derive(Clone, Debug, PartialEq)]
pub enum AblationAxis {
    /// named rows of [`LEARN_PRESETS`]
    LearnFlags(Vec<String>),
    Iterations(Vec<usize>),
    /// single flow layer vs flow-conv-flow
    Fcf,
}

impl AblationAxis {
    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::LearnFlags(_) => "learn",
            AblationAxis::Iterations(_) => "iterations",
            AblationAxis::Fcf => "fcf",
        }
    }

    fn cells(&self, base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
        let with = |f: &dyn Fn(&mut ModelConfig)| {
            let mut c = base.clone();
            f(&mut c.model);
            c
        };
        let cells: Vec<(String, ExperimentConfig)> = match self {
            AblationAxis::LearnFlags(names) => names
                .iter()
                .map(|n| {
                    let flags = learn_preset(n)
                        .ok_or_else(|| Error::invalid(format!("unknown learn preset `{n}`")))?;
                    Ok((n.clone(), with(&|m| m.learn = flags)))
                })
                .collect::<Result<_>>()?,
            AblationAxis::Iterations(its) => its
                .iter()
                .map(|&i| (i.to_string(), with(&|m| m.iterations = i)))
                .collect(),
            AblationAxis::Fcf => vec![
                ("flow".to_string(), with(&|m| m.kind = ModelKind::Flow)),
                ("fcf".to_string(), with(&|m| m.kind = ModelKind::Fcf)),
            ],
        };
        if cells.is_empty() {
            return Err(Error::invalid("ablation axis has no settings"));
        }
        Ok(cells)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub setting: String,
    pub epochs: usize,
    pub final_train_loss: f64,
    pub final_train_accuracy: f64,
    pub test_accuracy: f64,
}

/// One training run per setting, all on the same data and seed.
pub fn run_ablation(axis: &AblationAxis, base: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    let cells = axis.cells(base)?;
    let data = gen_motion_dataset(&base.data, base.seed)?;
    cells
        .into_iter()
        .map(|(setting, cfg)| {
            let r = run_on(&cfg, &data)?;
            let last_train = r
                .history
                .iter()
                .rev()
                .find(|h| h.split == super::train::Split::Train);
            Ok(AblationRow {
                axis: axis.name().to_string(),
                setting,
                epochs: cfg.train.epochs,
                final_train_loss: last_train.map_or(f64::NAN, |h| h.loss),
                final_train_accuracy: last_train.map_or(f64::NAN, |h| h.accuracy),
                test_accuracy: r.test.accuracy,
            })
        })
        .collect()
}
