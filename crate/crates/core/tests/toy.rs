use repflow::layer::LearnFlags;
use repflow::toy::{
    evaluate, gen_motion_dataset, run_ablation, run_experiment, shuffle_frames, train,
    AblationAxis, ExperimentConfig, ModelConfig, ModelKind, Split, ToyDatasetConfig, TrainConfig,
};

fn small() -> ExperimentConfig {
    ExperimentConfig {
        seed: 3,
        data: ToyDatasetConfig {
            train_per_class: 4,
            test_per_class: 4,
            frames: 3,
            size: 12,
            ..Default::default()
        },
        model: ModelConfig {
            features: 4,
            c_prime: 2,
            iterations: 3,
            ..Default::default()
        },
        train: TrainConfig {
            epochs: 1,
            batch: 4,
            ..Default::default()
        },
    }
}

#[test]
fn zero_epochs_leave_model_at_initialization() {
    let cfg = ExperimentConfig {
        train: TrainConfig {
            epochs: 0,
            ..small().train
        },
        ..small()
    };
    let r = run_experiment(&cfg).unwrap();
    assert!(r.history.is_empty());
    assert_eq!(r.model, r.initial);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let cfg = ExperimentConfig {
        train: TrainConfig {
            lr: 0.0,
            ..small().train
        },
        ..small()
    };
    let r = run_experiment(&cfg).unwrap();
    assert_eq!(r.model, r.initial);
}

#[test]
fn frozen_flow_params_stay_put_and_learnable_ones_move() {
    let mut frozen = small();
    frozen.model.learn = LearnFlags::NONE;
    let r = run_experiment(&frozen).unwrap();
    assert_eq!(r.model.flow.flow, r.initial.flow.flow);
    assert_ne!(r.model.stage_b, r.initial.stage_b);

    let r = run_experiment(&small()).unwrap();
    let (a, b) = (&r.initial.flow.flow, &r.model.flow.flow);
    assert!(a.theta != b.theta || a.w_x != b.w_x);
    assert_eq!(a.sobel_x, b.sobel_x);
}

#[test]
fn history_has_train_and_test_rows_per_epoch() {
    let cfg = ExperimentConfig {
        train: TrainConfig {
            epochs: 2,
            ..small().train
        },
        ..small()
    };
    let r = run_experiment(&cfg).unwrap();
    let splits: Vec<_> = r.history.iter().map(|h| (h.epoch, h.split)).collect();
    assert_eq!(
        splits,
        [
            (1, Split::Train),
            (1, Split::Test),
            (2, Split::Train),
            (2, Split::Test)
        ]
    );
    assert!(r
        .history
        .iter()
        .all(|h| h.loss.is_finite() && (0.0..=1.0).contains(&h.accuracy)));
}

#[test]
fn same_seed_reproduces_history_bit_exactly() {
    let a = run_experiment(&small()).unwrap();
    let b = run_experiment(&small()).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model, b.model);
}

#[test]
fn untrained_model_is_near_chance() {
    let cfg = ExperimentConfig::default();
    let data = gen_motion_dataset(&cfg.data, cfg.seed).unwrap();
    let e = evaluate(&cfg.init_model().unwrap(), &data.test).unwrap();
    // 99% binomial interval around 1/4 for 128 balanced samples
    let n = data.test.len() as f64;
    let half = 2.576 * (0.25f64 * 0.75 / n).sqrt();
    assert!((e.accuracy - 0.25).abs() <= half, "accuracy {}", e.accuracy);
    assert_eq!(evaluate(&cfg.init_model().unwrap(), &data.test).unwrap(), e);
    assert_eq!(e.confusion.iter().flatten().sum::<usize>(), data.test.len());
}

#[test]
fn shuffled_frames_reach_the_same_model_for_appearance_only() {
    let mut cfg = small();
    cfg.model.kind = ModelKind::Appearance;
    let data = gen_motion_dataset(&cfg.data, cfg.seed).unwrap();
    let mut m = cfg.init_model().unwrap();
    train(&mut m, &shuffle_frames(&data.train, 1), &[], &cfg.train).unwrap();
    assert!(evaluate(&m, &data.test).unwrap().accuracy.is_finite());
}

#[test]
fn divergence_is_reported_with_step() {
    let cfg = ExperimentConfig {
        train: TrainConfig {
            lr: 1e6,
            momentum: 0.0,
            epochs: 3,
            ..small().train
        },
        ..small()
    };
    match run_experiment(&cfg) {
        Err(repflow::Error::Diverged { .. }) | Err(repflow::Error::NonFiniteGradient(_)) => {}
        other => panic!(
            "expected divergence, got {:?}",
            other.map(|r| r.test.accuracy)
        ),
    }
}

#[test]
fn ablation_axes_produce_one_row_per_setting() {
    let base = small();
    let rows = run_ablation(
        &AblationAxis::LearnFlags(vec!["none".into(), "divergence+scalars".into()]),
        &base,
    )
    .unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].setting, "none");
    let rows = run_ablation(&AblationAxis::Iterations(vec![1, 10]), &base).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.setting.as_str()).collect::<Vec<_>>(),
        ["1", "10"]
    );
    assert!(rows
        .iter()
        .all(|r| r.axis == "iterations" && (0.0..=1.0).contains(&r.test_accuracy)));
    assert!(run_ablation(&AblationAxis::LearnFlags(vec!["bogus".into()]), &base).is_err());
    assert!(run_ablation(&AblationAxis::Iterations(vec![]), &base).is_err());
}

#[test]
fn config_rejects_unknown_keys() {
    let ok: ExperimentConfig = toml::from_str("seed = 4\n[train]\nepochs = 2\n").unwrap();
    assert_eq!((ok.seed, ok.train.epochs), (4, 2));
    assert!(toml::from_str::<ExperimentConfig>("[train]\nlearning_rate = 1.0\n").is_err());
}
