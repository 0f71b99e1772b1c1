use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use repflow::io::{flo_bytes, parse_flo, parse_pnm, Checkpoint, Image};
use repflow::synth::{shift_circular, texture};
use repflow::toy::TinyModel;
use repflow::{tvl1_flow, FeatureMap, TvParams};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn repflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_repflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn grey(f: &FeatureMap<f64>) -> Image {
    let data = f
        .data()
        .iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    Image::new(f.width(), f.height(), 1, data).unwrap()
}

/// The fixture pair: a 32x32 texture and its one-pixel circular shift in +x.
fn shift_fixture() -> (Image, Image) {
    let f: FeatureMap<f64> = texture(32, 32, &mut ChaCha8Rng::seed_from_u64(2024));
    (grey(&f), grey(&shift_circular(&f, 1, 0)))
}

/// Reference-solver flow of the fixture pair at 32-bit, 100 iterations.
fn oracle_flo() -> Vec<u8> {
    let (a, b) = shift_fixture();
    let u = tvl1_flow(
        &a.luma().cast::<f32>(),
        &b.luma().cast::<f32>(),
        &TvParams::default(),
        100,
    )
    .unwrap();
    flo_bytes(&u)
}

/// `REPFLOW_BLESS=1 cargo test -p repflow-cli` rewrites the fixtures.
#[test]
fn fixtures_match_their_generators() {
    let dir = fixtures();
    let (a, b) = shift_fixture();
    let golden = oracle_flo();
    if std::env::var_os("REPFLOW_BLESS").is_some() {
        std::fs::write(dir.join("shift_a.pgm"), a.to_bytes()).unwrap();
        std::fs::write(dir.join("shift_b.pgm"), b.to_bytes()).unwrap();
        std::fs::write(dir.join("shift_golden.flo"), &golden).unwrap();
    }
    assert_eq!(
        parse_pnm(&std::fs::read(dir.join("shift_a.pgm")).unwrap()).unwrap(),
        a
    );
    assert_eq!(
        parse_pnm(&std::fs::read(dir.join("shift_b.pgm")).unwrap()).unwrap(),
        b
    );
    assert_eq!(std::fs::read(dir.join("shift_golden.flo")).unwrap(), golden);
}

#[test]
fn flow_on_shift_pair_matches_golden_bit_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("u.flo");
    let viz = tmp.path().join("u.ppm");
    let d = fixtures();
    let o = repflow(&[
        "flow",
        s(&d.join("shift_a.pgm")),
        s(&d.join("shift_b.pgm")),
        "-o",
        s(&out),
        "--viz",
        s(&viz),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(&out).unwrap(),
        std::fs::read(d.join("shift_golden.flo")).unwrap()
    );
    let img = parse_pnm(&std::fs::read(&viz).unwrap()).unwrap();
    assert_eq!((img.width, img.height, img.channels), (32, 32, 3));
}

#[test]
fn identical_images_give_zero_flow_and_white_visualization() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, viz) = (tmp.path().join("z.flo"), tmp.path().join("z.ppm"));
    let a = fixtures().join("shift_a.pgm");
    let o = repflow(&[
        "flow",
        s(&a),
        s(&a),
        "-o",
        s(&out),
        "--viz",
        s(&viz),
        "--iterations",
        "20",
    ]);
    assert_eq!(code(&o), 0);
    let u = parse_flo(&std::fs::read(&out).unwrap()).unwrap();
    assert!(u.is_zero());
    assert!(parse_pnm(&std::fs::read(&viz).unwrap())
        .unwrap()
        .data
        .iter()
        .all(|&b| b == 255));
}

#[test]
fn flow_errors_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let a = fixtures().join("shift_a.pgm");
    let out = tmp.path().join("u.flo");

    let small = tmp.path().join("small.pgm");
    std::fs::write(&small, Image::new(4, 4, 1, vec![0; 16]).unwrap().to_bytes()).unwrap();
    assert_eq!(
        code(&repflow(&["flow", s(&a), s(&small), "-o", s(&out)])),
        4
    );

    let corrupt = tmp.path().join("bad.pgm");
    std::fs::write(&corrupt, b"P9\n1 1\n255\n\x00").unwrap();
    assert_eq!(
        code(&repflow(&["flow", s(&a), s(&corrupt), "-o", s(&out)])),
        3
    );
    assert_eq!(
        code(&repflow(&[
            "flow",
            s(&a),
            s(&tmp.path().join("missing.pgm")),
            "-o",
            s(&out)
        ])),
        3
    );

    let unwritable = tmp.path().join("no/such/dir/u.flo");
    assert_eq!(
        code(&repflow(&[
            "flow",
            s(&a),
            s(&a),
            "-o",
            s(&unwritable),
            "--iterations",
            "1"
        ])),
        5
    );

    assert_eq!(
        code(&repflow(&[
            "flow",
            s(&a),
            s(&a),
            "-o",
            s(&out),
            "--theta",
            "-1"
        ])),
        2
    );
    assert_eq!(code(&repflow(&["flow", s(&a)])), 2);
}

#[test]
fn corrupt_flo_magic_is_a_parse_error() {
    let mut bytes = std::fs::read(fixtures().join("shift_golden.flo")).unwrap();
    bytes[0] ^= 0xff;
    assert!(matches!(
        parse_flo(&bytes),
        Err(repflow::Error::Malformed { .. })
    ));
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.rfw");
    std::fs::write(&bad, &bytes).unwrap();
    assert_eq!(code(&repflow(&["inspect-checkpoint", s(&bad)])), 3);
}

#[test]
fn per_channel_writes_one_file_per_colour() {
    let tmp = tempfile::tempdir().unwrap();
    let f: FeatureMap<f64> = texture(12, 12, &mut ChaCha8Rng::seed_from_u64(5));
    let rgb = |f: &FeatureMap<f64>| {
        let data = f.data().iter().flat_map(|v| {
            let g = v.round() as u8;
            [g, 255 - g, g / 2]
        });
        Image::new(12, 12, 3, data.collect()).unwrap()
    };
    let (a, b) = (tmp.path().join("a.ppm"), tmp.path().join("b.ppm"));
    std::fs::write(&a, rgb(&f).to_bytes()).unwrap();
    std::fs::write(&b, rgb(&shift_circular(&f, 0, 1)).to_bytes()).unwrap();
    let out = tmp.path().join("u.flo");
    let o = repflow(&[
        "flow",
        s(&a),
        s(&b),
        "-o",
        s(&out),
        "--per-channel",
        "--iterations",
        "10",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for c in 0..3 {
        assert!(tmp.path().join(format!("u_c{c}.flo")).exists());
    }
    let o = repflow(&[
        "flow",
        s(&a),
        s(&b),
        "-o",
        s(&out),
        "--width",
        "f64",
        "--iterations",
        "10",
    ]);
    assert_eq!(code(&o), 0);
}

#[test]
fn gradcheck_passes_and_respects_leaf_selection() {
    let o = repflow(&["gradcheck", "--iterations", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("pass"));
    assert_eq!(code(&repflow(&["gradcheck", "--iterations", "1"])), 0);

    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("g.csv");
    let o = repflow(&["gradcheck", "--learn", "scalars", "--csv", s(&csv)]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    let leaves: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(leaves, ["d_tau", "d_lambda", "d_theta"]);
}

#[test]
fn gradcheck_failure_exits_with_its_own_code() {
    let o = repflow(&["gradcheck", "--learn", "scalars", "--tolerance", "1e-30"]);
    assert_eq!(code(&o), 7);
    assert!(String::from_utf8_lossy(&o.stderr).contains("d_"));
    assert_eq!(code(&repflow(&["gradcheck", "--learn", "bogus"])), 2);
}

#[test]
fn bench_writes_headered_csv_and_rejects_too_few_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("b.csv");
    let o = repflow(&[
        "--threads",
        "1",
        "bench",
        "--iterations",
        "2,4",
        "--sizes",
        "8",
        "--warmup",
        "0",
        "-o",
        s(&csv),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("iterations,size,channels,width,runs,median_ms"));
    assert_eq!(text.lines().count(), 3);
    assert_eq!(code(&repflow(&["bench", "--runs", "0"])), 2);
}

#[test]
fn train_with_zero_epochs_saves_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let o = repflow(&[
        "train",
        "--epochs",
        "0",
        "--per-class",
        "2",
        "--size",
        "12",
        "--frames",
        "3",
        "-o",
        s(tmp.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let init = std::fs::read(tmp.path().join("init.rfw")).unwrap();
    assert_eq!(std::fs::read(tmp.path().join("model.rfw")).unwrap(), init);
    assert_eq!(
        std::fs::read_to_string(tmp.path().join("history.csv")).unwrap(),
        ""
    );
    TinyModel::from_checkpoint(&Checkpoint::from_bytes(&init).unwrap()).unwrap();
}

fn small_train(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "--threads",
        "1",
        "train",
        "--epochs",
        "2",
        "--per-class",
        "3",
        "--size",
        "12",
        "--frames",
        "3",
    ];
    args.extend_from_slice(&[
        "--features",
        "4",
        "--c-prime",
        "2",
        "--iterations",
        "3",
        "-o",
        s(dir),
    ]);
    args.extend_from_slice(extra);
    repflow(&args)
}

#[test]
fn training_reruns_reproduce_history_bit_exactly() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cache = a.path().join("data.rfw");
    assert_eq!(
        code(&small_train(a.path(), &["--dataset-cache", s(&cache)])),
        0
    );
    assert!(cache.exists());
    assert_eq!(
        code(&small_train(b.path(), &["--dataset-cache", s(&cache)])),
        0
    );
    for f in ["history.csv", "model.rfw", "config.toml"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let hist = std::fs::read_to_string(a.path().join("history.csv")).unwrap();
    assert!(hist.starts_with("epoch,split,loss,accuracy\n"));
    assert_eq!(hist.lines().count(), 5);

    let o = repflow(&["inspect-checkpoint", s(&a.path().join("model.rfw"))]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("flow.flow.theta") && text.contains("model: flow"));

    // a cache built for other settings is refused
    let c = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&small_train(
            c.path(),
            &["--dataset-cache", s(&cache), "--seed", "9"]
        )),
        2
    );
}

#[test]
fn learned_checkpoint_drives_the_flow_command() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&small_train(tmp.path(), &[])), 0);
    let d = fixtures();
    let out = tmp.path().join("learned.flo");
    let ck = tmp.path().join("model.rfw");
    let o = repflow(&[
        "flow",
        s(&d.join("shift_a.pgm")),
        s(&d.join("shift_b.pgm")),
        "-o",
        s(&out),
        "--checkpoint",
        s(&ck),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(parse_flo(&std::fs::read(&out).unwrap())
        .unwrap()
        .is_finite());
}

#[test]
fn ablation_writes_one_row_per_setting() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec![
        "ablate",
        "--axis",
        "iterations",
        "--settings",
        "1,3",
        "--epochs",
        "1",
        "--per-class",
        "2",
    ];
    args.extend_from_slice(&[
        "--size",
        "12",
        "--frames",
        "3",
        "--features",
        "4",
        "--c-prime",
        "2",
        "-o",
        s(tmp.path()),
    ]);
    let o = repflow(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(tmp.path().join("ablation.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("axis,setting,epochs"));
    assert!(rows[1].starts_with("iterations,1,") && rows[2].starts_with("iterations,3,"));
    assert_eq!(
        code(&repflow(&[
            "ablate",
            "--axis",
            "colour",
            "-o",
            s(tmp.path())
        ])),
        2
    );
}

#[test]
fn config_file_sets_defaults_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "[gradcheck]\nlearn = [\"scalars\"]\niterations = 2\n").unwrap();
    let o = repflow(&["--config", s(&cfg), "gradcheck"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("iterations 2") && out.contains("d_theta") && !out.contains("d_wx"));
    let o = repflow(&["--config", s(&cfg), "gradcheck", "--learn", "divergence"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("d_wx"));

    std::fs::write(&cfg, "[gradcheck]\nlearning = 1\n").unwrap();
    assert_eq!(code(&repflow(&["--config", s(&cfg), "gradcheck"])), 3);
}
