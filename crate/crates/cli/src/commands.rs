use std::path::{Path, PathBuf};

use repflow::bench::{bench_csv, run_bench, BenchConfig, Width};
use repflow::gradcheck::{run_gradcheck, GradcheckConfig, LeafGroups};
use repflow::io::{
    atomic_write, csv_bytes, flow_to_rgb, load_flow_params, read_pnm, write_flo, write_pnm,
    Checkpoint, Image,
};
use repflow::layer::{rep_flow_forward, FlowParams};
use repflow::toy::{
    dataset_from_checkpoint, dataset_to_checkpoint, gen_motion_dataset, learn_preset, run_ablation,
    train, write_ablation_csv, write_history_csv, AblationAxis, ExperimentConfig, ModelKind, Split,
    TinyModel, ToyDataset, LEARN_PRESETS,
};
use repflow::tvl1::{DEFAULT_LAMBDA, DEFAULT_TAU, DEFAULT_THETA};
use repflow::{tvl1_flow, FeatureMap, FlowField, Real, TvParams};
use serde::Serialize;

use crate::config::{self, FileConfig};
use crate::error::{CliError, CliResult, EXIT_DIMENSIONS, EXIT_GRADCHECK, EXIT_WRITE};
use crate::{
    AblateArgs, BenchArgs, Cli, Command, ExperimentArgs, FlowArgs, GradcheckArgs, InspectArgs,
    KindArg, TrainArgs,
};

pub fn run(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("cannot configure threads: {e}")))?;
    }
    let file = config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Flow(a) => flow(a, &file),
        Command::Gradcheck(a) => gradcheck(a, &file),
        Command::Bench(a) => bench(a, &file),
        Command::Train(a) => train_cmd(a, &file),
        Command::Ablate(a) => ablate(a, &file),
        Command::InspectCheckpoint(a) => inspect(a),
    }
}

fn read_image(path: &Path) -> CliResult<Image> {
    read_pnm(path).map_err(|e| CliError::reading(path, e))
}

/// `out.flo` -> `out_c2.flo`.
fn channel_path(path: &Path, c: usize) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}_c{c}.{}", ext.to_string_lossy()),
        None => format!("{stem}_c{c}"),
    };
    path.with_file_name(name)
}

/// Flow-parameter prefix inside a checkpoint: a toy model stores its layer's
/// parameters under `flow.flow`, a bare layer under `flow`.
fn detect_prefix(ck: &Checkpoint) -> CliResult<String> {
    ["flow.flow", "flow", ""]
        .into_iter()
        .find(|p| ck.get(&join(p, "tau")).is_some())
        .map(str::to_owned)
        .ok_or_else(|| {
            CliError::new(
                crate::error::EXIT_MALFORMED,
                "checkpoint holds no flow parameters",
            )
        })
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}

fn solve<T: Real>(
    f1: &FeatureMap<f64>,
    f2: &FeatureMap<f64>,
    learned: Option<&FlowParams<f64>>,
    tv: &TvParams,
    iterations: usize,
) -> repflow::Result<FlowField<T>> {
    let (a, b) = (f1.cast::<T>(), f2.cast::<T>());
    match learned {
        Some(p) => Ok(rep_flow_forward(&a, &b, &p.cast::<T>(), iterations)?.0),
        None => tvl1_flow(&a, &b, tv, iterations),
    }
}

fn export<T: Real>(flow: &FlowField<T>, out: &Path, viz: Option<&Path>) -> CliResult {
    if !flow.is_finite() {
        return Err(CliError::from(repflow::Error::NonFinite(
            "flow output".into(),
        )));
    }
    write_flo(out, flow).map_err(|e| CliError::writing(out, e))?;
    if let Some(v) = viz {
        write_pnm(v, &flow_to_rgb(flow)).map_err(|e| CliError::writing(v, e))?;
    }
    Ok(())
}

fn flow(a: FlowArgs, file: &FileConfig) -> CliResult {
    let cfg = &file.flow;
    let img1 = read_image(&a.image1)?;
    let img2 = read_image(&a.image2)?;
    if (img1.width, img1.height, img1.channels) != (img2.width, img2.height, img2.channels) {
        return Err(CliError::new(
            EXIT_DIMENSIONS,
            format!(
                "images differ: {}x{}x{} vs {}x{}x{}",
                img1.width, img1.height, img1.channels, img2.width, img2.height, img2.channels
            ),
        ));
    }
    let width: Width = a.width.map(Width::from).or(cfg.width).unwrap_or_default();
    let per_channel = a.per_channel || cfg.per_channel.unwrap_or(false);

    let mut learned = None;
    let mut iterations = a.iterations.or(cfg.iterations);
    if let Some(path) = &a.checkpoint {
        let ck = Checkpoint::load(path).map_err(|e| CliError::reading(path, e))?;
        let prefix = match &a.prefix {
            Some(p) => p.clone(),
            None => detect_prefix(&ck)?,
        };
        let mut p = load_flow_params(&ck, &prefix).map_err(|e| CliError::reading(path, e))?;
        let parent = prefix
            .strip_suffix("flow")
            .unwrap_or("")
            .trim_end_matches('.');
        if iterations.is_none() {
            iterations = repflow::io::load_count(&ck, &join(parent, "iterations")).ok();
        }
        p.tau = a.tau.or(cfg.tau).unwrap_or(p.tau);
        p.lambda = a.lambda.or(cfg.lambda).unwrap_or(p.lambda);
        p.theta = a.theta.or(cfg.theta).unwrap_or(p.theta);
        p.validate()?;
        learned = Some(p);
    }
    let tv = TvParams {
        tau: a.tau.or(cfg.tau).unwrap_or(DEFAULT_TAU),
        lambda: a.lambda.or(cfg.lambda).unwrap_or(DEFAULT_LAMBDA),
        theta: a.theta.or(cfg.theta).unwrap_or(DEFAULT_THETA),
    };
    tv.validate()?;
    let iterations = iterations.unwrap_or(100);
    if iterations == 0 {
        return Err(CliError::usage("iterations must be >= 1"));
    }

    let (f1, f2) = if per_channel {
        (img1.planes(), img2.planes())
    } else {
        (img1.luma(), img2.luma())
    };
    let channels = f1.channels();
    for c in 0..channels {
        let (p1, p2) = (f1.plane(c), f2.plane(c));
        let (out, viz) = if channels > 1 {
            (
                channel_path(&a.output, c),
                a.viz.as_deref().map(|v| channel_path(v, c)),
            )
        } else {
            (a.output.clone(), a.viz.clone())
        };
        match width {
            Width::F32 => export(
                &solve::<f32>(&p1, &p2, learned.as_ref(), &tv, iterations)?,
                &out,
                viz.as_deref(),
            )?,
            Width::F64 => export(
                &solve::<f64>(&p1, &p2, learned.as_ref(), &tv, iterations)?,
                &out,
                viz.as_deref(),
            )?,
        }
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn leaf_groups(names: &[String]) -> CliResult<LeafGroups> {
    let mut g = LeafGroups::NONE;
    for n in names {
        match n.trim() {
            "scalars" => g.flow.scalars = true,
            "divergence" => g.flow.divergence = true,
            "sobel" => g.flow.sobel = true,
            "inputs" => g.inputs = true,
            "layer" => g.layer = true,
            "fcf" => g.fcf = true,
            "all" => g = LeafGroups::ALL,
            other => return Err(CliError::usage(format!("unknown leaf group `{other}`"))),
        }
    }
    Ok(g)
}

#[derive(Serialize)]
struct LeafRow<'a> {
    leaf: &'a str,
    entries: usize,
    max_abs_err: f64,
    rel_err: f64,
    passed: bool,
}

fn gradcheck(a: GradcheckArgs, file: &FileConfig) -> CliResult {
    let s = &file.gradcheck;
    let d = GradcheckConfig::default();
    let learn = a.learn.or_else(|| s.learn.clone());
    let cfg = GradcheckConfig {
        seed: a.seed.or(s.seed).unwrap_or(d.seed),
        iterations: a.iterations.or(s.iterations).unwrap_or(d.iterations),
        size: a.size.or(s.size).unwrap_or(d.size),
        step: a.step.or(s.step).unwrap_or(d.step),
        tolerance: a.tolerance.or(s.tolerance).unwrap_or(d.tolerance),
        groups: match learn {
            Some(names) => leaf_groups(&names)?,
            None => LeafGroups::ALL,
        },
    };
    let report = run_gradcheck(&cfg)?;
    println!(
        "iterations {} tolerance {:e} seed {}",
        cfg.iterations, cfg.tolerance, cfg.seed
    );
    println!(
        "{:<16} {:>8} {:>12} {:>12}  result",
        "leaf", "entries", "max_abs_err", "rel_err"
    );
    for l in &report.leaves {
        println!(
            "{:<16} {:>8} {:>12.3e} {:>12.3e}  {}",
            l.name,
            l.entries,
            l.max_abs_err,
            l.rel_err,
            if l.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(path) = &a.csv {
        let rows: Vec<LeafRow> = report
            .leaves
            .iter()
            .map(|l| LeafRow {
                leaf: &l.name,
                entries: l.entries,
                max_abs_err: l.max_abs_err,
                rel_err: l.rel_err,
                passed: l.passed,
            })
            .collect();
        atomic_write(path, &csv_bytes(&rows)?).map_err(|e| CliError::writing(path, e))?;
    }
    if report.passed() {
        println!("pass");
        Ok(())
    } else {
        Err(CliError::new(
            EXIT_GRADCHECK,
            format!("gradient check failed for {}", report.failing().join(", ")),
        ))
    }
}

fn bench(a: BenchArgs, file: &FileConfig) -> CliResult {
    let base = file.bench.clone().unwrap_or_default();
    let cfg = BenchConfig {
        iterations: a.iterations.unwrap_or(base.iterations),
        sizes: a.sizes.unwrap_or(base.sizes),
        channels: a.channels.unwrap_or(base.channels),
        runs: a.runs.unwrap_or(base.runs),
        warmup: a.warmup.unwrap_or(base.warmup),
        width: a.width.map(Width::from).unwrap_or(base.width),
        seed: a.seed.unwrap_or(base.seed),
    };
    let csv = bench_csv(&run_bench(&cfg)?)?;
    match &a.output {
        Some(path) => atomic_write(path, &csv).map_err(|e| CliError::writing(path, e))?,
        None => print!("{}", String::from_utf8_lossy(&csv)),
    }
    Ok(())
}

fn experiment_config(a: &ExperimentArgs, file: &FileConfig) -> CliResult<ExperimentConfig> {
    let mut cfg = file.experiment.clone();
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.momentum {
        cfg.train.momentum = v;
    }
    if let Some(v) = a.batch {
        cfg.train.batch = v;
    }
    if let Some(k) = a.kind {
        cfg.model.kind = match k {
            KindArg::Flow => ModelKind::Flow,
            KindArg::Fcf => ModelKind::Fcf,
            KindArg::Appearance => ModelKind::Appearance,
        };
    }
    if let Some(v) = a.iterations {
        cfg.model.iterations = v;
    }
    if let Some(v) = a.c_prime {
        cfg.model.c_prime = v;
    }
    if let Some(v) = a.features {
        cfg.model.features = v;
    }
    if let Some(name) = &a.learn {
        cfg.model.learn = learn_preset(name).ok_or_else(|| {
            let names: Vec<&str> = LEARN_PRESETS.iter().map(|(n, _)| *n).collect();
            CliError::usage(format!(
                "unknown learn preset `{name}`; expected one of {}",
                names.join(", ")
            ))
        })?;
    }
    if let Some(v) = a.per_class {
        cfg.data.train_per_class = v;
        cfg.data.test_per_class = v;
    }
    if let Some(v) = a.frames {
        cfg.data.frames = v;
    }
    if let Some(v) = a.size {
        cfg.data.size = v;
    }
    cfg.data.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn dataset(cfg: &ExperimentConfig, cache: Option<&Path>) -> CliResult<ToyDataset> {
    match cache {
        Some(path) if path.exists() => {
            let ck = Checkpoint::load(path).map_err(|e| CliError::reading(path, e))?;
            Ok(dataset_from_checkpoint(&ck, &cfg.data, cfg.seed)
                .map_err(|e| CliError::reading(path, e))?)
        }
        Some(path) => {
            let data = gen_motion_dataset(&cfg.data, cfg.seed)?;
            dataset_to_checkpoint(&data, &cfg.data, cfg.seed)?
                .save(path)
                .map_err(|e| CliError::writing(path, e))?;
            Ok(data)
        }
        None => Ok(gen_motion_dataset(&cfg.data, cfg.seed)?),
    }
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::new(EXIT_WRITE, format!("cannot create {}: {e}", dir.display())))
}

fn train_cmd(a: TrainArgs, file: &FileConfig) -> CliResult {
    let cfg = experiment_config(&a.experiment, file)?;
    let data = dataset(&cfg, a.experiment.dataset_cache.as_deref())?;
    create_dir(&a.out_dir)?;
    let initial = cfg.init_model()?;
    let mut model = initial.clone();
    let history = train(&mut model, &data.train, &data.test, &cfg.train)?;
    for h in history.iter().filter(|h| h.split == Split::Test) {
        println!(
            "epoch {:>3}  test loss {:.4}  accuracy {:.3}",
            h.epoch, h.loss, h.accuracy
        );
    }
    let out = |name: &str| a.out_dir.join(name);
    initial
        .save(&out("init.rfw"))
        .map_err(|e| CliError::writing(&out("init.rfw"), e))?;
    model
        .save(&out("model.rfw"))
        .map_err(|e| CliError::writing(&out("model.rfw"), e))?;
    write_history_csv(&out("history.csv"), &history)
        .map_err(|e| CliError::writing(&out("history.csv"), e))?;
    let text = toml::to_string(&cfg)
        .map_err(|e| CliError::usage(format!("cannot serialize config: {e}")))?;
    atomic_write(&out("config.toml"), text.as_bytes())
        .map_err(|e| CliError::writing(&out("config.toml"), e))?;
    let p = &model.flow.flow;
    let acc = repflow::toy::evaluate(&model, &data.test)?.accuracy;
    println!(
        "final test accuracy {acc:.3}; tau {:.4} lambda {:.4} theta {:.4}",
        p.tau, p.lambda, p.theta
    );
    println!("wrote {}", a.out_dir.display());
    Ok(())
}

fn ablate(a: AblateArgs, file: &FileConfig) -> CliResult {
    let cfg = experiment_config(&a.experiment, file)?;
    let axis_name = a
        .axis
        .or_else(|| file.ablation.axis.clone())
        .unwrap_or_else(|| "learn".into());
    let settings = a.settings.or_else(|| file.ablation.settings.clone());
    let axis = match axis_name.as_str() {
        "learn" => AblationAxis::LearnFlags(
            settings.unwrap_or_else(|| LEARN_PRESETS.iter().map(|(n, _)| n.to_string()).collect()),
        ),
        "iterations" => AblationAxis::Iterations(match settings {
            Some(s) => s
                .iter()
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| CliError::usage(format!("bad iteration count `{v}`")))
                })
                .collect::<CliResult<_>>()?,
            None => vec![1, 5, 10, 20],
        }),
        "fcf" => {
            if settings.is_some() {
                return Err(CliError::usage("the fcf axis takes no settings"));
            }
            AblationAxis::Fcf
        }
        other => {
            return Err(CliError::usage(format!(
                "unknown ablation axis `{other}`; expected learn, iterations or fcf"
            )))
        }
    };
    if a.experiment.dataset_cache.is_some() {
        dataset(&cfg, a.experiment.dataset_cache.as_deref())?;
    }
    create_dir(&a.out_dir)?;
    let rows = run_ablation(&axis, &cfg)?;
    println!(
        "{:<20} {:>10} {:>10} {:>10}",
        axis.name(),
        "train_loss",
        "train_acc",
        "test_acc"
    );
    for r in &rows {
        println!(
            "{:<20} {:>10.4} {:>10.3} {:>10.3}",
            r.setting, r.final_train_loss, r.final_train_accuracy, r.test_accuracy
        );
    }
    let path = a.out_dir.join("ablation.csv");
    write_ablation_csv(&path, &rows).map_err(|e| CliError::writing(&path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn inspect(a: InspectArgs) -> CliResult {
    let ck = Checkpoint::load(&a.path).map_err(|e| CliError::reading(&a.path, e))?;
    println!("{}: {} tensors", a.path.display(), ck.len());
    println!(
        "{:<28} {:<18} {:>12} {:>12} {:>12}",
        "name", "dims", "min", "max", "mean"
    );
    for t in ck.tensors() {
        let (lo, hi, sum) = t
            .data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY, 0.0), |(l, h, s), &v| {
                (l.min(v), h.max(v), s + v)
            });
        let mean = if t.data.is_empty() {
            f64::NAN
        } else {
            sum / t.data.len() as f64
        };
        println!(
            "{:<28} {:<18} {:>12.5} {:>12.5} {:>12.5}",
            t.name,
            format!("{:?}", t.dims),
            lo,
            hi,
            mean
        );
    }
    if ck.get("model.kind").is_some() {
        let m = TinyModel::from_checkpoint(&ck).map_err(|e| CliError::reading(&a.path, e))?;
        let p = &m.flow.flow;
        println!(
            "model: {} features {} c_prime {} iterations {}; tau {:.4} lambda {:.4} theta {:.4}",
            m.kind.name(),
            m.stage_a.out_channels,
            m.flow.c_prime(),
            m.flow.iterations,
            p.tau,
            p.lambda,
            p.theta
        );
    }
    Ok(())
}
