//! Acceptance gates for the whole toolkit, run in order with one timed
//! pass/fail line per criterion. Every criterion executes even after an
//! earlier failure; the test asserts once at the end so the full table always
//! prints (visible with `cargo test --test acceptance -- --nocapture`, in the
//! failure output otherwise, and in `acceptance-report.txt` under the cargo
//! tmp directory either way).

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use graspflow::augment::{
    bicubic_upsample, gp_augment, sample_gamma_factor, symmetrize, AugmentConfig,
};
use graspflow::check::gradient_check_suite;
use graspflow::data::{
    generate_synthetic, label_oracle, split, Dataset, SceneParams, SplitKind, SplitSpec,
    IMAGE_SIDE,
};
use graspflow::eval::{ablation_csv, ablation_grid, calibration};
use graspflow::model::{ConvSpec, LayerSpec, Model, ModelConfig};
use graspflow::optim::{train, TrainConfig};
use graspflow::rng::stream;
use graspflow::tensor::ops::{conv2d, dense, maxpool2d};
use graspflow::tensor::Tensor;
use rand::Rng;
use sha2::{Digest, Sha256};

/// Validation accuracy (percent) of the first verified run of the toy
/// training criterion (20k examples, image split, default architecture,
/// batch 128, base rate 1e-4 staircase, one epoch, normalization only),
/// frozen as a regression floor.
const TOY_BASELINE_VAL_ACC: f64 = 88.98;
/// Allowed drop below the frozen baseline, in accuracy points.
const TOY_TOLERANCE_PT: f64 = 1.0;

const GRAD_TOLERANCE: f64 = 1e-4;

type Verdict = Result<String, String>;

fn tmp_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
}

#[test]
fn acceptance() {
    let shared = SharedData::build();
    let criteria: Vec<(&str, Box<dyn FnOnce(&SharedData) -> Verdict>)> = vec![
        ("gradient correctness", Box::new(|_| criterion_gradients())),
        ("oracle equivalence", Box::new(|_| criterion_oracles())),
        ("augmentation statistics", Box::new(|_| criterion_augment_stats())),
        ("z-adjustment label consistency", Box::new(|_| criterion_label_consistency())),
        ("split protocol", Box::new(|s| criterion_splits(s))),
        ("calibration correctness", Box::new(|_| criterion_calibration())),
        ("end-to-end toy training", Box::new(|s| criterion_toy_training(s))),
        ("training determinism", Box::new(|_| criterion_determinism())),
    ];
    let budgets = [120.0, 60.0, f64::INFINITY, f64::INFINITY, f64::INFINITY, f64::INFINITY, 1200.0, f64::INFINITY];

    let mut report = String::new();
    let mut all_passed = true;
    for (i, ((name, f), budget)) in criteria.into_iter().zip(budgets).enumerate() {
        let start = Instant::now();
        let verdict = f(&shared);
        let dt = start.elapsed().as_secs_f64();
        let (mut passed, detail) = match verdict {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        let mut detail = detail;
        if dt > budget {
            passed = false;
            let _ = write!(detail, " [exceeded {budget:.0}s budget]");
        }
        let line = format!(
            "criterion {} {:<34} {:>8.2}s  {}  {}",
            i + 1,
            name,
            dt,
            if passed { "pass" } else { "FAIL" },
            detail
        );
        println!("{line}");
        report.push_str(&line);
        report.push('\n');
        all_passed &= passed;
    }
    let report_path = tmp_dir().join("acceptance-report.txt");
    fs::write(&report_path, &report).unwrap();
    assert!(all_passed, "acceptance criteria failed:\n{report}");
}

/// The 20k-example corpus shared by the split-protocol and toy-training
/// criteria.
struct SharedData {
    corpus: Dataset,
}

impl SharedData {
    fn build() -> SharedData {
        let corpus =
            generate_synthetic(&SceneParams { seed: 0, ..SceneParams::default() }, 20_000)
                .expect("synthetic generation");
        SharedData { corpus }
    }
}

// ---------------------------------------------------------------------------
// 1. Gradients

fn criterion_gradients() -> Verdict {
    let trials = 100;
    let results = gradient_check_suite(0, trials).map_err(|e| e.to_string())?;
    let worst =
        results.iter().map(|(_, e)| *e).fold(0.0f64, f64::max);
    if worst < GRAD_TOLERANCE {
        Ok(format!("{} checks x {trials} trials, worst relative error {worst:.2e}", results.len()))
    } else {
        let bad: Vec<String> = results
            .iter()
            .filter(|(_, e)| *e >= GRAD_TOLERANCE)
            .map(|(n, e)| format!("{n}: {e:.2e}"))
            .collect();
        Err(format!("gradient checks above {GRAD_TOLERANCE:.0e}: {}", bad.join(", ")))
    }
}

// ---------------------------------------------------------------------------
// 2. Bitwise oracle equivalence

fn uniform_vals(seed: u64, case: u64, n: usize) -> Vec<f64> {
    let mut rng = stream(seed, case, 0, 0x4f52); // "OR"
    (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
}

fn naive_conv2d(x: &[f64], n: usize, c: usize, h: usize, w: usize, wt: &[f64], o: usize, k: usize) -> Vec<f64> {
    let p = k / 2;
    let mut y = vec![0.0; n * o * h * w];
    for e in 0..n {
        for oc in 0..o {
            for oy in 0..h {
                for ox in 0..w {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for dy in 0..k {
                            for dx in 0..k {
                                let (iy, ix) = (oy + dy, ox + dx);
                                let tap = if iy >= p && iy < h + p && ix >= p && ix < w + p {
                                    x[((e * c + ic) * h + (iy - p)) * w + (ix - p)]
                                } else {
                                    0.0
                                };
                                acc += wt[((oc * c + ic) * k + dy) * k + dx] * tap;
                            }
                        }
                    }
                    y[((e * o + oc) * h + oy) * w + ox] = acc;
                }
            }
        }
    }
    y
}

fn naive_maxpool(x: &[f64], n: usize, c: usize, h: usize, w: usize, size: usize) -> Vec<f64> {
    let (oh, ow) = (h / size, w / size);
    let mut y = vec![0.0; n * c * oh * ow];
    for e in 0..n * c {
        let plane = &x[e * h * w..(e + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..size {
                    for dx in 0..size {
                        m = m.max(plane[(oy * size + dy) * w + ox * size + dx]);
                    }
                }
                y[(e * oh + oy) * ow + ox] = m;
            }
        }
    }
    y
}

fn naive_dense(x: &[f64], n: usize, i: usize, w: &[f64], o: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n * o];
    for r in 0..n {
        for j in 0..o {
            let mut acc = 0.0;
            for k in 0..i {
                acc += x[r * i + k] * w[j * i + k];
            }
            y[r * o + j] = acc + b[j];
        }
    }
    y
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn criterion_oracles() -> Verdict {
    let mut case = 0u64;
    let mut conv_cases = 0usize;
    for n in [1usize, 2] {
        for c in [1usize, 3] {
            for o in [1usize, 2] {
                for h in 1..=8usize {
                    for w in 1..=8usize {
                        for k in [1usize, 3, 5, 7] {
                            case += 1;
                            let x = uniform_vals(1, case, n * c * h * w);
                            let wt = uniform_vals(2, case, o * c * k * k);
                            let got = conv2d(
                                &Tensor::from_vec(&[n, c, h, w], x.clone()),
                                &Tensor::from_vec(&[o, c, k, k], wt.clone()),
                            )
                            .map_err(|e| e.to_string())?;
                            let want = naive_conv2d(&x, n, c, h, w, &wt, o, k);
                            if !bits_equal(got.data(), &want) {
                                return Err(format!(
                                    "conv2d differs from naive loops at n={n} c={c} o={o} h={h} w={w} k={k}"
                                ));
                            }
                            conv_cases += 1;
                        }
                    }
                }
            }
        }
    }

    let mut pool_cases = 0usize;
    for n in [1usize, 2] {
        for c in [1usize, 2] {
            for size in 2..=4usize {
                for mult in 1..=(8 / size) {
                    let (h, w) = (size * mult, size * mult);
                    case += 1;
                    let x = uniform_vals(3, case, n * c * h * w);
                    let got = maxpool2d(&Tensor::from_vec(&[n, c, h, w], x.clone()), size)
                        .map_err(|e| e.to_string())?;
                    let want = naive_maxpool(&x, n, c, h, w, size);
                    if !bits_equal(got.data(), &want) {
                        return Err(format!(
                            "maxpool2d differs from naive loops at n={n} c={c} h={h} size={size}"
                        ));
                    }
                    pool_cases += 1;
                }
            }
        }
    }

    let mut dense_cases = 0usize;
    for n in 1..=8usize {
        for i in 1..=8usize {
            for o in 1..=8usize {
                case += 1;
                let x = uniform_vals(4, case, n * i);
                let w = uniform_vals(5, case, o * i);
                let b = uniform_vals(6, case, o);
                let got = dense(
                    &Tensor::from_vec(&[n, i], x.clone()),
                    &Tensor::from_vec(&[o, i], w.clone()),
                    &Tensor::from_vec(&[o], b.clone()),
                )
                .map_err(|e| e.to_string())?;
                let want = naive_dense(&x, n, i, &w, o, &b);
                if !bits_equal(got.data(), &want) {
                    return Err(format!("dense differs from naive loops at n={n} i={i} o={o}"));
                }
                dense_cases += 1;
            }
        }
    }
    Ok(format!(
        "bitwise equal on {conv_cases} conv, {pool_cases} pool, {dense_cases} dense shapes"
    ))
}

// ---------------------------------------------------------------------------
// 3. Augmentation statistics

fn criterion_augment_stats() -> Verdict {
    const DRAWS: usize = 1_000_000;
    let cfg = AugmentConfig::default();

    let mut rng = stream(11, 0, 0, 0x535441); // "STA"
    let (mut sum, mut sum_sq) = (0.0f64, 0.0f64);
    for _ in 0..DRAWS {
        let g = sample_gamma_factor(&mut rng, cfg.gamma_shape, cfg.gamma_scale);
        sum += g;
        sum_sq += g * g;
    }
    let mean = sum / DRAWS as f64;
    let var = sum_sq / DRAWS as f64 - mean * mean;
    let std = var.sqrt();
    let want_std = (cfg.gamma_shape).sqrt() * cfg.gamma_scale; // 0.0316...
    if (mean - 1.0).abs() > 1e-4 {
        return Err(format!("gamma mean {mean:.6} outside 1 +/- 1e-4"));
    }
    if (std - want_std).abs() > 0.05 * want_std {
        return Err(format!("gamma std {std:.6} outside {want_std:.4} +/- 5%"));
    }

    let mut rng = stream(11, 1, 0, 0x535441);
    let (mut v_flips, mut h_flips) = (0usize, 0usize);
    let mut tile = vec![0.0f32; 4];
    for _ in 0..DRAWS {
        let (fv, fh) = symmetrize(&mut tile, 2, 2, &cfg, &mut rng);
        v_flips += fv as usize;
        h_flips += fh as usize;
    }
    let (v_rate, h_rate) = (v_flips as f64 / DRAWS as f64, h_flips as f64 / DRAWS as f64);
    for (axis, rate) in [("vertical", v_rate), ("horizontal", h_rate)] {
        if (rate - 0.5).abs() > 0.005 {
            return Err(format!("{axis} flip rate {rate:.4} outside 0.5 +/- 0.005"));
        }
    }

    let mut rng = stream(11, 2, 0, 0x535441);
    let mut applied = 0usize;
    let mut image = vec![0.0f32; IMAGE_SIDE * IMAGE_SIDE];
    for _ in 0..DRAWS {
        applied += gp_augment(&mut image, &cfg, &mut rng).map_err(|e| e.to_string())? as usize;
    }
    let gp_rate = applied as f64 / DRAWS as f64;
    if (gp_rate - 0.5).abs() > 0.005 {
        return Err(format!("grid-noise rate {gp_rate:.4} outside 0.5 +/- 0.005"));
    }

    // Bicubic upsampling must reproduce constants and act linearly.
    let side = cfg.gp_grid;
    for c in [0.7f64, -3.25] {
        let up = bicubic_upsample(&vec![c; side * side], side, IMAGE_SIDE);
        if up.iter().any(|v| (v - c).abs() > 1e-6) {
            return Err(format!("bicubic upsample does not reproduce constant {c}"));
        }
    }
    let mut rng = stream(11, 3, 0, 0x535441);
    let g1: Vec<f64> = (0..side * side).map(|_| rng.gen::<f64>() - 0.5).collect();
    let g2: Vec<f64> = (0..side * side).map(|_| rng.gen::<f64>() - 0.5).collect();
    let (a, b) = (1.7f64, -0.6f64);
    let mixed: Vec<f64> = g1.iter().zip(&g2).map(|(x, y)| a * x + b * y).collect();
    let up_mixed = bicubic_upsample(&mixed, side, IMAGE_SIDE);
    let up1 = bicubic_upsample(&g1, side, IMAGE_SIDE);
    let up2 = bicubic_upsample(&g2, side, IMAGE_SIDE);
    for ((m, x), y) in up_mixed.iter().zip(&up1).zip(&up2) {
        if (m - (a * x + b * y)).abs() > 1e-6 {
            return Err("bicubic upsample is not linear".into());
        }
    }

    Ok(format!(
        "gamma mean {mean:.5}, std {std:.5}; flip rates {v_rate:.4}/{h_rate:.4}; noise rate {gp_rate:.4}; bicubic constant+linear"
    ))
}

// ---------------------------------------------------------------------------
// 4. Multiplicative z-adjustment keeps the oracle label

fn criterion_label_consistency() -> Verdict {
    const N: usize = 10_000;
    let params = SceneParams { seed: 123, ..SceneParams::default() };
    let ds = generate_synthetic(&params, N).map_err(|e| e.to_string())?;
    let oracle = params.oracle();
    let cfg = AugmentConfig::default();
    let mut rng = stream(123, 0, 0, 0x4c4247); // "LBG"
    let mut agree = 0usize;
    for ex in &ds.examples {
        let image: Vec<f64> = ex.image.iter().map(|&v| v as f64).collect();
        let base = label_oracle(&image, IMAGE_SIDE, ex.z as f64, &oracle);
        let g = sample_gamma_factor(&mut rng, cfg.gamma_shape, cfg.gamma_scale);
        let scaled: Vec<f64> = image.iter().map(|v| v * g).collect();
        let adjusted = label_oracle(&scaled, IMAGE_SIDE, ex.z as f64 * g, &oracle.scaled(g));
        agree += (base == adjusted) as usize;
    }
    if agree == N {
        Ok(format!("label preserved on {N}/{N} scaled examples"))
    } else {
        Err(format!("label changed on {}/{N} scaled examples", N - agree))
    }
}

// ---------------------------------------------------------------------------
// 5. Split protocol

fn criterion_splits(shared: &SharedData) -> Verdict {
    let ds = &shared.corpus;
    for kind in [SplitKind::Image, SplitKind::Pose, SplitKind::Object] {
        let spec = SplitSpec::new(kind, 0.8, 5).map_err(|e| e.to_string())?;
        let (train_idx, val_idx) = split(ds, &spec).map_err(|e| e.to_string())?;

        let mut all: Vec<usize> = train_idx.iter().chain(val_idx.iter()).copied().collect();
        all.sort_unstable();
        if all != (0..ds.len()).collect::<Vec<_>>() {
            return Err(format!("{kind:?} split is not an exhaustive disjoint partition"));
        }

        let key = |i: usize| -> u64 {
            let ex = &ds.examples[i];
            match kind {
                SplitKind::Image => ex.image_id,
                SplitKind::Pose => ex.pose_id,
                SplitKind::Object => ex.object_id,
            }
        };
        let train_keys: std::collections::HashSet<u64> =
            train_idx.iter().map(|&i| key(i)).collect();
        if val_idx.iter().any(|&i| train_keys.contains(&key(i))) {
            return Err(format!("{kind:?} split leaks keys between train and validation"));
        }

        let rerun = split(ds, &spec).map_err(|e| e.to_string())?;
        let render = |idx: &[usize]| {
            idx.iter().map(|i| format!("{i}\n")).collect::<String>()
        };
        if render(&rerun.0) != render(&train_idx) || render(&rerun.1) != render(&val_idx) {
            return Err(format!("{kind:?} split rerun is not byte-identical"));
        }
    }
    Ok(format!("image/pose/object splits on {} examples: disjoint, exhaustive, reproducible", ds.len()))
}

// ---------------------------------------------------------------------------
// 6. Calibration

fn criterion_calibration() -> Verdict {
    const N: usize = 100_000;
    let levels = [0.05, 0.15, 0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85, 0.95];
    let mut rng = stream(6, 0, 0, 0x43414c); // "CAL"
    let mut probs = Vec::with_capacity(N);
    let mut labels = Vec::with_capacity(N);
    for i in 0..N {
        let p = levels[i % levels.len()];
        probs.push(p);
        labels.push(rng.gen_bool(p) as u8);
    }
    let report = calibration(&probs, &labels, 10).map_err(|e| e.to_string())?;
    if report.ece >= 0.02 {
        return Err(format!("calibrated Monte-Carlo predictor has ECE {:.4} >= 0.02", report.ece));
    }

    // Worked single-bucket example: ten predictions at 0.65 with six
    // successes must land in [0.6, 0.7) with freq 0.60 and mean 0.65.
    let probs = vec![0.65; 10];
    let labels = [1u8, 1, 1, 1, 1, 1, 0, 0, 0, 0];
    let worked = calibration(&probs, &labels, 10).map_err(|e| e.to_string())?;
    let bucket = &worked.buckets[6];
    if bucket.count != 10
        || (bucket.mean_pred - 0.65).abs() > 1e-12
        || (bucket.freq - 0.60).abs() > 1e-12
        || (worked.ece - 0.05).abs() > 1e-12
    {
        return Err(format!(
            "worked example bucket has count {} mean {} freq {} (ece {})",
            bucket.count, bucket.mean_pred, bucket.freq, worked.ece
        ));
    }
    Ok(format!("Monte-Carlo ECE {:.4} < 0.02; worked bucket freq 0.60 / mean 0.65", report.ece))
}

// ---------------------------------------------------------------------------
// 7. End-to-end toy training

fn criterion_toy_training(shared: &SharedData) -> Verdict {
    let ds = &shared.corpus;
    let spec = SplitSpec::new(SplitKind::Image, 0.8, 0).map_err(|e| e.to_string())?;
    let (train_idx, val_idx) = split(ds, &spec).map_err(|e| e.to_string())?;
    let model_cfg = ModelConfig { init_seed: 0, ..ModelConfig::default() };
    let train_cfg = TrainConfig { epochs: 1, seed: 0, ..TrainConfig::default() };
    let mut model = Model::<f32>::build(&model_cfg).map_err(|e| e.to_string())?;
    // Normalization only: at one epoch the stochastic augmentations act as
    // regularizers and lower the ceiling this gate is meant to freeze; the
    // companion ablation below reports their effect instead.
    let history = train(
        &mut model,
        ds,
        &train_idx,
        &val_idx,
        &AugmentConfig::normalize_only(),
        &train_cfg,
        |r| {
            println!(
                "  toy training epoch {} step {} loss {:.4} train {:.2}% val {:.2}%",
                r.epoch,
                r.step,
                r.train_loss,
                r.train_acc * 100.0,
                r.val_acc * 100.0
            );
        },
    )
    .map_err(|e| e.to_string())?;
    let val_acc = history.last().map(|r| r.val_acc * 100.0).unwrap_or(0.0);

    // Companion ablation at reduced scale: reported, not asserted.
    let ablation_note = match companion_ablation(ds) {
        Ok(path) => format!("companion ablation at {path}"),
        Err(e) => format!("companion ablation failed: {e}"),
    };

    let floor = TOY_BASELINE_VAL_ACC - TOY_TOLERANCE_PT;
    if val_acc >= floor {
        Ok(format!("validation accuracy {val_acc:.2}% >= floor {floor:.2}%; {ablation_note}"))
    } else {
        Err(format!("validation accuracy {val_acc:.2}% below floor {floor:.2}%; {ablation_note}"))
    }
}

fn companion_ablation(ds: &Dataset) -> Result<String, String> {
    let subset = Dataset::new(ds.examples[..2000].to_vec()).map_err(|e| e.to_string())?;
    let conv = |f, k| LayerSpec::Conv(ConvSpec::new(f, k));
    let model_cfg = ModelConfig {
        image_tower: vec![conv(8, 5), LayerSpec::MaxPool { window: 4, stride: 4 }],
        merge_channels: 4,
        merge_conv: ConvSpec::new(8, 3),
        post_merge: vec![ConvSpec::new(8, 3), ConvSpec::new(8, 3)],
        head: vec![16, 2],
        input_size: 32,
        init_seed: 0,
    };
    let train_cfg =
        TrainConfig { epochs: 2, batch_size: 64, base_lr: 1e-3, seed: 0, ..TrainConfig::default() };
    let spec = SplitSpec::new(SplitKind::Image, 0.8, 0).map_err(|e| e.to_string())?;
    let mut rung = AugmentConfig::normalize_only();
    let mut rows = vec![rung];
    rung.symmetrize = true;
    rows.push(rung);
    rung.mult_pixels = true;
    rows.push(rung);
    rung.mult_adjust_z = true;
    rows.push(rung);
    rung.gp_noise = true;
    rows.push(rung);
    let table = ablation_grid::<f32>(&subset, &model_cfg, &rows, &train_cfg, &spec)
        .map_err(|e| e.to_string())?;
    let path = tmp_dir().join("acceptance-ablation.csv");
    fs::write(&path, ablation_csv(&table)).map_err(|e| e.to_string())?;
    Ok(path.display().to_string())
}

// ---------------------------------------------------------------------------
// 8. Determinism of full train invocations

fn criterion_determinism() -> Verdict {
    let bin = env!("CARGO_BIN_EXE_graspflow");
    let dir = tmp_dir().join("acceptance-determinism");
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| e.to_string())?;
    }
    fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let cfg = dir.join("run.cfg");
    fs::write(
        &cfg,
        "[train]\nepochs = 2\nbatch_size = 32\n[model]\n\
         tower = conv:4:3:1,pool:4:4,conv:4:3:1,pool:2:2\nmerge_channels = 2\n\
         merge = conv:4:3:1\npost = conv:4:3:1,conv:4:3:1\nhead = 8,2\n",
    )
    .map_err(|e| e.to_string())?;
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(())
        } else {
            Err(format!(
                "{args:?} failed: {}",
                String::from_utf8_lossy(&out.stderr)
            ))
        }
    };
    let data = dir.join("data");
    run(&[
        "generate-data",
        "--count",
        "300",
        "--seed",
        "1",
        "--out",
        data.to_str().unwrap(),
    ])?;
    let dataset = data.join("dataset.gfd");
    for name in ["a", "b"] {
        run(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            dataset.to_str().unwrap(),
            "--seed",
            "33",
            "--out",
            dir.join(name).to_str().unwrap(),
        ])?;
    }
    let hash = |name: &str, file: &str| -> Result<String, String> {
        let bytes = fs::read(dir.join(name).join(file)).map_err(|e| e.to_string())?;
        Ok(format!("{:x}", Sha256::digest(&bytes)))
    };
    for file in ["checkpoint.gfm", "history.csv", "manifest.txt"] {
        let (a, b) = (hash("a", file)?, hash("b", file)?);
        if a != b {
            return Err(format!("{file} hashes differ between identical runs"));
        }
    }
    Ok("checkpoint, history and manifest hash-equal across identical runs".into())
}
