//! Desk-scale motion classification: synthetic data, a tiny classifier built
//! around the flow layer, training and ablations.

mod data;
mod experiment;
mod model;
mod persist;
mod train;

pub use data::{
    gen_motion_dataset, moving_sample, shuffle_frames, ToyDataset, ToyDatasetConfig, VideoSample,
    DIRECTIONS, DISTRACTOR_MIX,
};
pub use experiment::{
    learn_preset, run_ablation, run_experiment, run_on, AblationAxis, AblationRow,
    ExperimentConfig, ExperimentResult, LEARN_PRESETS,
};
pub use model::{
    cross_entropy, softmax, ForwardPass, ModelConfig, ModelGrads, ModelKind, ModelMomentum,
    ModelTape, TinyModel, CE_EPS,
};
pub use persist::{
    ablation_csv, dataset_from_checkpoint, dataset_to_checkpoint, history_csv, write_ablation_csv,
    write_history_csv,
};
pub use train::{evaluate, train, EpochRecord, Evaluation, Split, TrainConfig};
