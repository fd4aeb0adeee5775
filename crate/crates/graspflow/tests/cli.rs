//! End-to-end tests of the `graspflow` binary: exit codes, file outputs,
//! manifest hashing and cross-checks against the library API.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use graspflow::augment::{apply_pipeline, AugmentConfig, NormStats};
use graspflow::data::load_dataset;
use graspflow::model::{Model, ModelConfig};
use graspflow::rng::example_stream;
use sha2::{Digest, Sha256};

const BIN: &str = env!("CARGO_BIN_EXE_graspflow");

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    if dir.exists() {
        fs::remove_dir_all(&dir).unwrap();
    }
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary should spawn")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed:\n{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn generate(dir: &Path, count: usize, seed: u64) -> PathBuf {
    let out = dir.join("data");
    run_ok(&[
        "generate-data",
        "--count",
        &count.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        out.to_str().unwrap(),
    ]);
    out.join("dataset.gfd")
}

/// Model section small enough for sub-second training runs.
const SMALL_MODEL: &str = "[model]\n\
    tower = conv:4:3:1,pool:4:4,conv:4:3:1,pool:2:2\n\
    merge_channels = 2\n\
    merge = conv:4:3:1\n\
    post = conv:4:3:1,conv:4:3:1\n\
    head = 8,2\n";

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, format!("{SMALL_MODEL}{extra}")).unwrap();
    path
}

#[test]
fn split_reruns_are_byte_identical_and_exhaustive() {
    let dir = scratch("cli-split");
    let data = generate(&dir, 150, 11);
    let args = |out: &Path| {
        vec![
            "split".to_string(),
            "--data".into(),
            data.to_str().unwrap().into(),
            "--kind".into(),
            "object".into(),
            "--fraction".into(),
            "0.8".into(),
            "--seed".into(),
            "7".into(),
            "--out".into(),
            out.to_str().unwrap().into(),
        ]
    };
    for out in [dir.join("a"), dir.join("b")] {
        let owned = args(&out);
        let refs: Vec<&str> = owned.iter().map(String::as_str).collect();
        run_ok(&refs);
    }
    for name in ["train.idx", "val.idx", "manifest.txt"] {
        assert_eq!(
            fs::read(dir.join("a").join(name)).unwrap(),
            fs::read(dir.join("b").join(name)).unwrap(),
            "{name} differs between reruns"
        );
    }
    let read_idx = |name: &str| -> Vec<usize> {
        fs::read_to_string(dir.join("a").join(name))
            .unwrap()
            .lines()
            .map(|l| l.parse().unwrap())
            .collect()
    };
    let (train, val) = (read_idx("train.idx"), read_idx("val.idx"));
    let mut all: Vec<usize> = train.iter().chain(val.iter()).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..150).collect::<Vec<_>>(), "partition must be exhaustive and disjoint");
}

#[test]
fn train_epochs_zero_writes_fresh_init_checkpoint() {
    let dir = scratch("cli-train0");
    let data = generate(&dir, 80, 3);
    let cfg = small_config(&dir, "");
    let out = dir.join("run");
    run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--seed",
        "5",
        "--epochs",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]);
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.trim(), "epoch,step,lr,train_loss,train_acc,val_acc", "history must be header-only");

    // The library path with the same resolved config must produce the same
    // bytes: seed 5 becomes init_seed, everything else comes from the file.
    let text = "input_size=32\ninit_seed=5\nmerge_channels=2\n\
        tower=conv:4:3:1,pool:4:4,conv:4:3:1,pool:2:2\n\
        merge=conv:4:3:1\npost=conv:4:3:1,conv:4:3:1\nhead=8,2\n";
    let model = Model::<f32>::build(&ModelConfig::from_text(text).unwrap()).unwrap();
    let fresh = dir.join("fresh.gfm");
    model.save(&fresh).unwrap();
    assert_eq!(
        fs::read(out.join("checkpoint.gfm")).unwrap(),
        fs::read(&fresh).unwrap(),
        "untrained checkpoint must equal a fresh initialization"
    );
}

#[test]
fn train_evaluate_calibrate_flow() {
    let dir = scratch("cli-flow");
    let data = generate(&dir, 120, 2);
    let cfg = small_config(&dir, "[train]\nepochs = 1\nbatch_size = 32\n");
    let run_dir = dir.join("run");
    run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--seed",
        "4",
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    let checkpoint = run_dir.join("checkpoint.gfm");
    for name in ["history.csv", "history.svg", "manifest.txt"] {
        assert!(run_dir.join(name).is_file(), "missing {name}");
    }

    let eval_dir = dir.join("eval");
    let stdout = run_ok(&[
        "evaluate",
        "--model",
        checkpoint.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--seed",
        "4",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(stdout.contains("validation accuracy"), "got {stdout:?}");
    let eval_csv = fs::read_to_string(eval_dir.join("eval.csv")).unwrap();
    let mut lines = eval_csv.lines();
    assert_eq!(lines.next(), Some("split,count,accuracy"));
    for expected in ["train,", "val,"] {
        let line = lines.next().unwrap();
        assert!(line.starts_with(expected), "got {line:?}");
        let acc: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=100.0).contains(&acc), "accuracy {acc} out of range");
    }

    let cal_dir = dir.join("cal");
    let stdout = run_ok(&[
        "calibrate",
        "--model",
        checkpoint.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--seed",
        "4",
        "--buckets",
        "6",
        "--out",
        cal_dir.to_str().unwrap(),
    ]);
    assert!(stdout.contains("expected calibration error"), "got {stdout:?}");
    let cal_csv = fs::read_to_string(cal_dir.join("calibration.csv")).unwrap();
    assert_eq!(cal_csv.lines().count(), 7, "header plus one row per bucket:\n{cal_csv}");
    assert!(fs::read_to_string(cal_dir.join("calibration.svg")).unwrap().contains("<svg"));
}

#[test]
fn train_reruns_hash_identically() {
    let dir = scratch("cli-determinism");
    let data = generate(&dir, 100, 9);
    let cfg = small_config(&dir, "[train]\nepochs = 2\nbatch_size = 25\n");
    for out in ["r1", "r2"] {
        run_ok(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--seed",
            "21",
            "--out",
            dir.join(out).to_str().unwrap(),
        ]);
    }
    let manifest = |name: &str| fs::read_to_string(dir.join(name).join("manifest.txt")).unwrap();
    assert_eq!(manifest("r1"), manifest("r2"), "reruns must hash identically");
    assert_eq!(
        fs::read(dir.join("r1").join("checkpoint.gfm")).unwrap(),
        fs::read(dir.join("r2").join("checkpoint.gfm")).unwrap()
    );
}

#[test]
fn manifest_hashes_are_correct_sha256() {
    let dir = scratch("cli-manifest");
    let data = generate(&dir, 40, 1);
    let manifest = fs::read_to_string(data.parent().unwrap().join("manifest.txt")).unwrap();
    let line = manifest.lines().find(|l| l.ends_with("dataset.gfd")).unwrap();
    let recorded = line.split_whitespace().next().unwrap();
    let digest = Sha256::digest(fs::read(&data).unwrap());
    assert_eq!(recorded, format!("{digest:x}"));
}

#[test]
fn ablate_emits_one_row_per_grid_line() {
    let dir = scratch("cli-ablate");
    let data = generate(&dir, 60, 6);
    let cfg = small_config(&dir, "[train]\nepochs = 1\nbatch_size = 30\n");
    let grid = dir.join("grid.txt");
    fs::write(&grid, "# two rows\nnone\nsymmetrize=on,gp_noise=on\n").unwrap();
    let out = dir.join("abl");
    run_ok(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--grid-file",
        grid.to_str().unwrap(),
        "--seed",
        "8",
        "--out",
        out.to_str().unwrap(),
    ]);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "header plus two rows:\n{csv}");
    assert!(lines[1].starts_with("0,0,0,0,"));
    assert!(lines[2].starts_with("1,0,0,1,"));
}

#[test]
fn preview_trace_matches_library_pipeline() {
    let dir = scratch("cli-preview");
    let data = generate(&dir, 10, 13);
    let out = dir.join("prev");
    run_ok(&[
        "augment-preview",
        "--data",
        data.to_str().unwrap(),
        "--count",
        "3",
        "--seed",
        "17",
        "--out",
        out.to_str().unwrap(),
    ]);
    let csv = fs::read_to_string(out.join("preview.csv")).unwrap();
    let ds = load_dataset(&data).unwrap();
    let cfg = AugmentConfig { normalize: false, ..AugmentConfig::default() };
    let stats = NormStats::new(0.0, 1.0).unwrap();
    let mut rows = csv.lines().skip(1);
    for ex in &ds.examples[..3] {
        let row = rows.next().expect("one row per previewed example");
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[0], ex.image_id.to_string());
        let mut rng = example_stream(17, ex.image_id, 0);
        let (_, _, _, trace) = apply_pipeline(ex, &cfg, &stats, &mut rng).unwrap();
        assert_eq!(fields[1], (trace.flip_v as u8).to_string());
        assert_eq!(fields[2], (trace.flip_h as u8).to_string());
        let expected = trace.mult_factor.map(|f| f.to_string()).unwrap_or_default();
        assert_eq!(fields[3], expected);
        assert_eq!(fields[4], (trace.gp_applied as u8).to_string());
        for stage in ["before", "after"] {
            let pgm = out.join(format!("example_{:06}_{stage}.pgm", ex.image_id));
            assert!(pgm.is_file(), "missing {}", pgm.display());
        }
    }
    assert!(rows.next().is_none(), "count flag must cap the preview");
}

#[test]
fn gradcheck_exits_zero_and_prints_every_check() {
    let out = run(&["gradcheck", "--seed", "2", "--trials", "5"]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    for name in [
        "conv2d",
        "maxpool2d",
        "dense",
        "relu-chain",
        "batchnorm-train",
        "batchnorm-eval",
        "softmax-cross-entropy",
        "full-model",
    ] {
        assert!(stdout.contains(name), "missing {name} in:\n{stdout}");
    }
}

#[test]
fn validation_failures_exit_one_without_partial_outputs() {
    let dir = scratch("cli-exitcodes");

    let out = run(&["split", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(1), "unknown flag");
    assert!(!out.stderr.is_empty(), "usage must go to stderr");

    let missing = dir.join("missing.gfd");
    let target = dir.join("never");
    let out = run(&[
        "split",
        "--data",
        missing.to_str().unwrap(),
        "--out",
        target.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "missing input file");
    assert!(!target.exists(), "failed validation must not create outputs");

    let data = generate(&dir, 30, 1);
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--fraction",
        "1.5",
        "--out",
        target.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "fraction outside (0,1)");
    assert!(!target.exists());

    let cfg = dir.join("bad.cfg");
    fs::write(&cfg, "[run]\nrandomness = yes\n").unwrap();
    let out = run(&[
        "split",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        target.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "unknown config key");
    assert!(!target.exists());
}
