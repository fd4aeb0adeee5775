//! Command-line workflow: dataset generation, splitting, training,
//! evaluation, calibration, ablation, augmentation preview and gradient
//! self-check behind one binary.
//!
//! All randomness flows from an explicit `--seed` (default 0); values resolve
//! as flag over config file over built-in default. Every command validates
//! its full configuration and inputs before writing anything, and finishes an
//! output directory with a `manifest.txt` of SHA-256 file hashes.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::augment::{
    apply_pipeline, compute_norm_stats, normalize, write_pgm16, AugmentConfig, NormStats,
};
use crate::check::gradient_check_suite;
use crate::data::{
    generate_synthetic, load_dataset, save_dataset, split, Dataset, SceneParams, SplitKind,
    SplitSpec, IMAGE_SIDE,
};
use crate::error::{Error, Result};
use crate::eval::{ablation_csv, ablation_grid, calibration, write_calibration_report};
use crate::eval::write_history_report;
use crate::model::{Model, ModelConfig};
use crate::optim::{split_accuracy, train, TrainConfig};
use crate::rng::example_stream;
use crate::scalar::Scalar;
use crate::tensor::{Mode, Tensor};

const GRAD_TOLERANCE: f64 = 1e-4;
const EVAL_BATCH: usize = 256;

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, A>(argv: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

#[derive(Parser)]
#[command(name = "graspflow", version, about = "Grasp quality learning toolkit")]
struct Cli {
    /// Sectioned key=value config file; flags override its entries.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SeedFlag {
    /// Root seed for every random draw in this command.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SplitFlags {
    /// Partition key: image, pose or object.
    #[arg(long)]
    kind: Option<String>,
    /// Training fraction in (0, 1).
    #[arg(long)]
    fraction: Option<f64>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    decay_factor: Option<f64>,
    #[arg(long)]
    decay_every: Option<u64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Compute precision: f32 (default) or f64.
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Args)]
struct AugmentFlags {
    /// Random flips: on or off.
    #[arg(long)]
    symmetrize: Option<String>,
    /// Multiplicative pixel scaling: on or off.
    #[arg(long)]
    mult_pixels: Option<String>,
    /// Scale the grasp depth with the pixels: on or off.
    #[arg(long)]
    mult_adjust_z: Option<String>,
    /// Low-frequency additive noise: on or off.
    #[arg(long)]
    gp_noise: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset.
    GenerateData {
        /// Number of examples.
        #[arg(long)]
        count: Option<usize>,
        #[command(flatten)]
        seed: SeedFlag,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write train/validation index files for a dataset.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        split: SplitFlags,
        #[command(flatten)]
        seed: SeedFlag,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint, history CSV and history plot.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        split: SplitFlags,
        #[command(flatten)]
        seed: SeedFlag,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        augment: AugmentFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a checkpoint on the train and validation splits.
    Evaluate {
        /// Checkpoint file.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        split: SplitFlags,
        #[command(flatten)]
        seed: SeedFlag,
        #[arg(long)]
        precision: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reliability diagram and expected calibration error on the validation
    /// split.
    Calibrate {
        /// Checkpoint file.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Probability buckets in the reliability diagram.
        #[arg(long)]
        buckets: Option<usize>,
        #[command(flatten)]
        split: SplitFlags,
        #[command(flatten)]
        seed: SeedFlag,
        #[arg(long)]
        precision: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once per augmentation combination and tabulate accuracies.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// One combination per line as comma-separated key=on|off pairs
        /// (keys: symmetrize, mult_pixels, mult_adjust_z, gp_noise) or the
        /// word "none"; defaults to the cumulative ladder.
        #[arg(long)]
        grid_file: Option<PathBuf>,
        #[command(flatten)]
        split: SplitFlags,
        #[command(flatten)]
        seed: SeedFlag,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Before/after augmentation images plus a trace table.
    AugmentPreview {
        #[arg(long)]
        data: PathBuf,
        /// Examples to render.
        #[arg(long)]
        count: Option<usize>,
        #[command(flatten)]
        seed: SeedFlag,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient verification; exits nonzero on failure.
    Gradcheck {
        #[command(flatten)]
        seed: SeedFlag,
        /// Seeded repetitions per check.
        #[arg(long)]
        trials: Option<usize>,
    },
}

fn dispatch(cli: Cli) -> Result<()> {
    configure_threads()?;
    let settings = Settings::load(cli.config.as_deref())?;
    let s = &settings;
    match cli.command {
        Command::GenerateData { count, seed, out } => cmd_generate(count, &seed, &out, s),
        Command::Split { data, split, seed, out } => cmd_split(&data, &split, &seed, &out, s),
        Command::Train { data, split, seed, train, augment, out } => {
            cmd_train(&data, &split, &seed, &train, &augment, &out, s)
        }
        Command::Evaluate { model, data, split, seed, precision, out } => {
            cmd_evaluate(&model, &data, &split, &seed, &precision, &out, s)
        }
        Command::Calibrate { model, data, buckets, split, seed, precision, out } => {
            cmd_calibrate(&model, &data, buckets, &split, &seed, &precision, &out, s)
        }
        Command::Ablate { data, grid_file, split, seed, train, out } => {
            cmd_ablate(&data, grid_file.as_deref(), &split, &seed, &train, &out, s)
        }
        Command::AugmentPreview { data, count, seed, out } => {
            cmd_preview(&data, count, &seed, &out, s)
        }
        Command::Gradcheck { seed, trials } => cmd_gradcheck(&seed, trials, s),
    }
}

/// GF_THREADS caps internal parallelism; unset keeps the library default.
fn configure_threads() -> Result<()> {
    match std::env::var("GF_THREADS") {
        Err(_) => Ok(()),
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                // The global pool may already exist in-process; that is fine.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                Ok(())
            }
            _ => Err(Error::Config(format!(
                "GF_THREADS must be a positive integer, got {v:?}"
            ))),
        },
    }
}

// ---------------------------------------------------------------------------
// Config file

const KNOWN_KEYS: &[(&str, &[&str])] = &[
    ("run", &["seed"]),
    (
        "data",
        &[
            "count",
            "height_min",
            "height_max",
            "footprint_min",
            "footprint_max",
            "stroke_min",
            "stroke_max",
            "clearance",
            "finger_offset",
        ],
    ),
    ("split", &["kind", "fraction"]),
    (
        "train",
        &[
            "epochs",
            "batch_size",
            "base_lr",
            "decay_factor",
            "decay_every",
            "weight_decay",
            "precision",
        ],
    ),
    (
        "augment",
        &[
            "symmetrize",
            "mult_pixels",
            "mult_adjust_z",
            "gp_noise",
            "gamma_shape",
            "gamma_scale",
            "gp_sigma",
            "gp_grid",
            "gp_prob",
            "flip_prob",
        ],
    ),
    ("model", &["input_size", "init_seed", "merge_channels", "tower", "merge", "post", "head"]),
    ("calibrate", &["buckets"]),
];

/// Parsed `[section]` / `key=value` config file. Unknown sections or keys are
/// rejected so typos fail loudly instead of silently using defaults.
struct Settings {
    map: BTreeMap<(String, String), String>,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Settings> {
        let mut map = BTreeMap::new();
        let Some(path) = path else {
            return Ok(Settings { map });
        };
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        let mut section: Option<String> = None;
        for (at, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |detail: String| Error::Config(format!("config line {}: {detail}", at + 1));
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| bad(format!("unterminated section header {line:?}")))?
                    .trim();
                if !KNOWN_KEYS.iter().any(|(s, _)| *s == name) {
                    return Err(bad(format!("unknown section {name:?}")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let section = section
                .clone()
                .ok_or_else(|| bad(format!("key {key:?} appears before any [section]")))?;
            let known = KNOWN_KEYS
                .iter()
                .find(|(s, _)| *s == section)
                .map(|(_, keys)| keys.contains(&key))
                .unwrap_or(false);
            if !known {
                return Err(bad(format!("unknown key {key:?} in section [{section}]")));
            }
            map.insert((section, key.to_string()), value.to_string());
        }
        Ok(Settings { map })
    }

    fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.map.get(&(section.to_string(), key.to_string())).map(String::as_str)
    }

    fn parse<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("config [{section}] {key}: cannot parse {v:?}"))
            }),
        }
    }

    fn model_entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map
            .iter()
            .filter(|((s, _), _)| s == "model")
            .map(|((_, k), v)| (k.as_str(), v.as_str()))
    }
}

fn parse_onoff(what: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{what} must be on or off, got {v:?}"))),
    }
}

// ---------------------------------------------------------------------------
// Flag/file/default resolution

fn resolve_seed(flag: &SeedFlag, s: &Settings) -> Result<u64> {
    Ok(flag.seed.or(s.parse("run", "seed")?).unwrap_or(0))
}

fn resolve_split_spec(flags: &SplitFlags, seed: u64, s: &Settings) -> Result<SplitSpec> {
    let kind = match flags.kind.as_deref().or_else(|| s.get("split", "kind")) {
        Some(v) => SplitKind::from_str(v)?,
        None => SplitKind::Image,
    };
    let fraction = flags.fraction.or(s.parse("split", "fraction")?).unwrap_or(0.8);
    SplitSpec::new(kind, fraction, seed)
}

fn resolve_train_config(flags: &TrainFlags, seed: u64, s: &Settings) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        base_lr: flags.base_lr.or(s.parse("train", "base_lr")?).unwrap_or(d.base_lr),
        decay_factor: flags
            .decay_factor
            .or(s.parse("train", "decay_factor")?)
            .unwrap_or(d.decay_factor),
        decay_every: flags
            .decay_every
            .or(s.parse("train", "decay_every")?)
            .unwrap_or(d.decay_every),
        weight_decay: flags
            .weight_decay
            .or(s.parse("train", "weight_decay")?)
            .unwrap_or(d.weight_decay),
        batch_size: flags.batch_size.or(s.parse("train", "batch_size")?).unwrap_or(d.batch_size),
        epochs: flags.epochs.or(s.parse("train", "epochs")?).unwrap_or(d.epochs),
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_augment_config(flags: &AugmentFlags, s: &Settings) -> Result<AugmentConfig> {
    let mut cfg = AugmentConfig::default();
    let toggles: [(&str, &Option<String>, &mut bool); 4] = [
        ("symmetrize", &flags.symmetrize, &mut cfg.symmetrize),
        ("mult_pixels", &flags.mult_pixels, &mut cfg.mult_pixels),
        ("mult_adjust_z", &flags.mult_adjust_z, &mut cfg.mult_adjust_z),
        ("gp_noise", &flags.gp_noise, &mut cfg.gp_noise),
    ];
    for (key, flag, field) in toggles {
        if let Some(v) = s.get("augment", key) {
            *field = parse_onoff(key, v)?;
        }
        if let Some(v) = flag {
            *field = parse_onoff(key, v)?;
        }
    }
    if let Some(v) = s.parse("augment", "gamma_shape")? {
        cfg.gamma_shape = v;
    }
    if let Some(v) = s.parse("augment", "gamma_scale")? {
        cfg.gamma_scale = v;
    }
    if let Some(v) = s.parse("augment", "gp_sigma")? {
        cfg.gp_sigma = v;
    }
    if let Some(v) = s.parse("augment", "gp_grid")? {
        cfg.gp_grid = v;
    }
    if let Some(v) = s.parse("augment", "gp_prob")? {
        cfg.gp_prob = v;
    }
    if let Some(v) = s.parse("augment", "flip_prob")? {
        cfg.flip_prob = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Builds the model configuration from the defaults, the `[model]` section
/// (if any) and the run seed, which becomes `init_seed` unless the section
/// pins one explicitly.
fn resolve_model_config(seed: u64, s: &Settings) -> Result<ModelConfig> {
    let mut entries: Vec<(String, String)> = ModelConfig::default()
        .to_text()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let mut set = |key: &str, value: &str| {
        if let Some(e) = entries.iter_mut().find(|(k, _)| k == key) {
            e.1 = value.to_string();
        }
    };
    set("init_seed", &seed.to_string());
    for (key, value) in s.model_entries() {
        set(key, value);
    }
    let text: String = entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    ModelConfig::from_text(&text)
}

#[derive(Clone, Copy)]
enum Precision {
    F32,
    F64,
}

fn resolve_precision(flag: &Option<String>, s: &Settings) -> Result<Precision> {
    match flag.as_deref().or_else(|| s.get("train", "precision")).unwrap_or("f32") {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(Error::Config(format!("precision must be f32 or f64, got {other:?}"))),
    }
}

fn require_file(what: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} file {} does not exist", path.display())))
    }
}

fn require_trainable_model(cfg: &ModelConfig) -> Result<()> {
    if cfg.input_size != IMAGE_SIDE {
        return Err(Error::Config(format!(
            "model input size {} does not match the {}x{} dataset images",
            cfg.input_size, IMAGE_SIDE, IMAGE_SIDE
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Output directory

fn write_indices(path: &Path, idx: &[usize]) -> Result<()> {
    let mut text = String::with_capacity(idx.len() * 7);
    for i in idx {
        text.push_str(&i.to_string());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Hashes every regular file in `dir` (except the manifest itself) into
/// `manifest.txt`, sorted by name for byte-stable output.
fn write_manifest(dir: &Path) -> Result<()> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if name != "manifest.txt" {
                names.push(name);
            }
        }
    }
    names.sort();
    let mut text = String::new();
    for name in &names {
        let digest = Sha256::digest(fs::read(dir.join(name))?);
        text.push_str(&format!("{digest:x}  {name}\n"));
    }
    fs::write(dir.join("manifest.txt"), text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Subcommands

fn cmd_generate(count: Option<usize>, seed: &SeedFlag, out: &Path, s: &Settings) -> Result<()> {
    let seed = resolve_seed(seed, s)?;
    let count = count.or(s.parse("data", "count")?).unwrap_or(1000);
    let d = SceneParams::default();
    let params = SceneParams {
        height_range: (
            s.parse("data", "height_min")?.unwrap_or(d.height_range.0),
            s.parse("data", "height_max")?.unwrap_or(d.height_range.1),
        ),
        footprint_range: (
            s.parse("data", "footprint_min")?.unwrap_or(d.footprint_range.0),
            s.parse("data", "footprint_max")?.unwrap_or(d.footprint_range.1),
        ),
        stroke_min: s.parse("data", "stroke_min")?.unwrap_or(d.stroke_min),
        stroke_max: s.parse("data", "stroke_max")?.unwrap_or(d.stroke_max),
        clearance: s.parse("data", "clearance")?.unwrap_or(d.clearance),
        finger_offset: s.parse("data", "finger_offset")?.unwrap_or(d.finger_offset),
        seed,
    };
    let ds = generate_synthetic(&params, count)?;
    fs::create_dir_all(out)?;
    let path = out.join("dataset.gfd");
    save_dataset(&ds, &path)?;
    write_manifest(out)?;
    let positives = ds.examples.iter().filter(|e| e.label == 1).count();
    println!("wrote {} examples ({} positive) to {}", ds.examples.len(), positives, path.display());
    Ok(())
}

fn cmd_split(
    data: &Path,
    flags: &SplitFlags,
    seed: &SeedFlag,
    out: &Path,
    s: &Settings,
) -> Result<()> {
    let seed = resolve_seed(seed, s)?;
    let spec = resolve_split_spec(flags, seed, s)?;
    require_file("data", data)?;
    let ds = load_dataset(data)?;
    let (train_idx, val_idx) = split(&ds, &spec)?;
    fs::create_dir_all(out)?;
    write_indices(&out.join("train.idx"), &train_idx)?;
    write_indices(&out.join("val.idx"), &val_idx)?;
    write_manifest(out)?;
    println!("split {} examples into {} train / {} validation", ds.examples.len(), train_idx.len(), val_idx.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    split_flags: &SplitFlags,
    seed: &SeedFlag,
    train_flags: &TrainFlags,
    augment_flags: &AugmentFlags,
    out: &Path,
    s: &Settings,
) -> Result<()> {
    let seed = resolve_seed(seed, s)?;
    let spec = resolve_split_spec(split_flags, seed, s)?;
    let train_cfg = resolve_train_config(train_flags, seed, s)?;
    let aug = resolve_augment_config(augment_flags, s)?;
    let model_cfg = resolve_model_config(seed, s)?;
    require_trainable_model(&model_cfg)?;
    let precision = resolve_precision(&train_flags.precision, s)?;
    require_file("data", data)?;
    let ds = load_dataset(data)?;
    let (train_idx, val_idx) = split(&ds, &spec)?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Config(format!(
            "split leaves {} train / {} validation examples",
            train_idx.len(),
            val_idx.len()
        )));
    }
    fs::create_dir_all(out)?;
    match precision {
        Precision::F32 => run_train::<f32>(&ds, &train_idx, &val_idx, &aug, &train_cfg, &model_cfg, out)?,
        Precision::F64 => run_train::<f64>(&ds, &train_idx, &val_idx, &aug, &train_cfg, &model_cfg, out)?,
    }
    write_manifest(out)?;
    Ok(())
}

fn run_train<T: Scalar>(
    ds: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    aug: &AugmentConfig,
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    out: &Path,
) -> Result<()> {
    let mut model = Model::<T>::build(model_cfg)?;
    println!(
        "training {} parameters on {} examples ({} validation)",
        model.param_count(),
        train_idx.len(),
        val_idx.len()
    );
    let history = train(&mut model, ds, train_idx, val_idx, aug, train_cfg, |r| {
        println!(
            "epoch {:>3}  step {:>6}  lr {:.3e}  loss {:.4}  train {:.2}%  val {:.2}%",
            r.epoch,
            r.step,
            r.lr,
            r.train_loss,
            r.train_acc * 100.0,
            r.val_acc * 100.0
        );
    })?;
    model.save(out.join("checkpoint.gfm"))?;
    write_history_report(&history, out.join("history.csv"), out.join("history.svg"))?;
    if let Some(last) = history.last() {
        println!("final validation accuracy {:.2}%", last.val_acc * 100.0);
    }
    Ok(())
}

fn cmd_evaluate(
    model: &Path,
    data: &Path,
    split_flags: &SplitFlags,
    seed: &SeedFlag,
    precision: &Option<String>,
    out: &Path,
    s: &Settings,
) -> Result<()> {
    let seed = resolve_seed(seed, s)?;
    let spec = resolve_split_spec(split_flags, seed, s)?;
    let precision = resolve_precision(precision, s)?;
    require_file("model", model)?;
    require_file("data", data)?;
    let ds = load_dataset(data)?;
    let (train_idx, val_idx) = split(&ds, &spec)?;
    let (train_acc, val_acc) = match precision {
        Precision::F32 => run_evaluate::<f32>(model, &ds, &train_idx, &val_idx)?,
        Precision::F64 => run_evaluate::<f64>(model, &ds, &train_idx, &val_idx)?,
    };
    fs::create_dir_all(out)?;
    let csv = format!(
        "split,count,accuracy\ntrain,{},{train_acc}\nval,{},{val_acc}\n",
        train_idx.len(),
        val_idx.len()
    );
    fs::write(out.join("eval.csv"), csv)?;
    write_manifest(out)?;
    println!("train accuracy {train_acc:.2}%  validation accuracy {val_acc:.2}%");
    Ok(())
}

fn run_evaluate<T: Scalar>(
    model_path: &Path,
    ds: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
) -> Result<(f64, f64)> {
    let mut model = Model::<T>::load(model_path)?;
    require_trainable_model(model.config())?;
    let stats = train_split_stats(ds, train_idx)?;
    let train_acc = split_accuracy(&mut model, ds, train_idx, &stats, EVAL_BATCH)? * 100.0;
    let val_acc = split_accuracy(&mut model, ds, val_idx, &stats, EVAL_BATCH)? * 100.0;
    Ok((train_acc, val_acc))
}

fn train_split_stats(ds: &Dataset, train_idx: &[usize]) -> Result<NormStats> {
    let images: Vec<&[f32]> =
        train_idx.iter().map(|&i| ds.examples[i].image.as_slice()).collect();
    compute_norm_stats(&images)
}

#[allow(clippy::too_many_arguments)]
fn cmd_calibrate(
    model: &Path,
    data: &Path,
    buckets: Option<usize>,
    split_flags: &SplitFlags,
    seed: &SeedFlag,
    precision: &Option<String>,
    out: &Path,
    s: &Settings,
) -> Result<()> {
    let seed = resolve_seed(seed, s)?;
    let spec = resolve_split_spec(split_flags, seed, s)?;
    let buckets = buckets.or(s.parse("calibrate", "buckets")?).unwrap_or(10);
    let precision = resolve_precision(precision, s)?;
    require_file("model", model)?;
    require_file("data", data)?;
    let ds = load_dataset(data)?;
    let (train_idx, val_idx) = split(&ds, &spec)?;
    let probs = match precision {
        Precision::F32 => run_probs::<f32>(model, &ds, &train_idx, &val_idx)?,
        Precision::F64 => run_probs::<f64>(model, &ds, &train_idx, &val_idx)?,
    };
    let labels: Vec<u8> = val_idx.iter().map(|&i| ds.examples[i].label).collect();
    let report = calibration(&probs, &labels, buckets)?;
    fs::create_dir_all(out)?;
    write_calibration_report(&report, &out.join("calibration.csv"), &out.join("calibration.svg"))?;
    write_manifest(out)?;
    println!(
        "expected calibration error {:.4} over {} buckets ({} validation examples)",
        report.ece,
        report.n_buckets,
        probs.len()
    );
    Ok(())
}

/// Success probabilities over the validation split, normalized with
/// train-split statistics.
fn run_probs<T: Scalar>(
    model_path: &Path,
    ds: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
) -> Result<Vec<f64>> {
    let mut model = Model::<T>::load(model_path)?;
    require_trainable_model(model.config())?;
    let stats = train_split_stats(ds, train_idx)?;
    let mut probs = Vec::with_capacity(val_idx.len());
    for chunk in val_idx.chunks(EVAL_BATCH) {
        let n = chunk.len();
        let mut image_data = Vec::with_capacity(n * IMAGE_SIDE * IMAGE_SIDE);
        let mut z_data = Vec::with_capacity(n);
        for &i in chunk {
            let ex = &ds.examples[i];
            let mut image = ex.image.clone();
            normalize(&mut image, &stats);
            image_data.extend(image.iter().map(|&px| T::from_f64(px as f64)));
            z_data.push(T::from_f64(ex.z as f64));
        }
        let images = Tensor::from_vec(&[n, 1, IMAGE_SIDE, IMAGE_SIDE], image_data);
        let z = Tensor::from_vec(&[n], z_data);
        let p = model.forward(&images, &z, Mode::Eval)?;
        probs.extend(p.data().iter().map(|&v| Scalar::to_f64(v)));
    }
    Ok(probs)
}

fn cmd_ablate(
    data: &Path,
    grid_file: Option<&Path>,
    split_flags: &SplitFlags,
    seed: &SeedFlag,
    train_flags: &TrainFlags,
    out: &Path,
    s: &Settings,
) -> Result<()> {
    let seed = resolve_seed(seed, s)?;
    let spec = resolve_split_spec(split_flags, seed, s)?;
    let train_cfg = resolve_train_config(train_flags, seed, s)?;
    let model_cfg = resolve_model_config(seed, s)?;
    require_trainable_model(&model_cfg)?;
    let precision = resolve_precision(&train_flags.precision, s)?;
    let rows = match grid_file {
        Some(path) => {
            require_file("grid", path)?;
            parse_grid_rows(&fs::read_to_string(path)?)?
        }
        None => default_grid(),
    };
    require_file("data", data)?;
    let ds = load_dataset(data)?;
    let table = match precision {
        Precision::F32 => ablation_grid::<f32>(&ds, &model_cfg, &rows, &train_cfg, &spec)?,
        Precision::F64 => ablation_grid::<f64>(&ds, &model_cfg, &rows, &train_cfg, &spec)?,
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("ablation.csv"), ablation_csv(&table))?;
    write_manifest(out)?;
    let mark = |b: bool| if b { "on " } else { "off" };
    for row in &table {
        println!(
            "symmetrize {}  mult_pixels {}  mult_adjust_z {}  gp_noise {}  val {:.2}%  train {:.2}%",
            mark(row.symmetrize),
            mark(row.mult_pixels),
            mark(row.mult_adjust_z),
            mark(row.gp_noise),
            row.val_acc,
            row.train_acc
        );
    }
    Ok(())
}

/// Cumulative ladder from no augmentation to the full pipeline.
fn default_grid() -> Vec<AugmentConfig> {
    let mut cur = AugmentConfig::normalize_only();
    let mut rows = vec![cur];
    cur.symmetrize = true;
    rows.push(cur);
    cur.mult_pixels = true;
    rows.push(cur);
    cur.mult_adjust_z = true;
    rows.push(cur);
    cur.gp_noise = true;
    rows.push(cur);
    rows
}

fn parse_grid_rows(text: &str) -> Result<Vec<AugmentConfig>> {
    let mut rows = Vec::new();
    for (at, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |detail: String| Error::Config(format!("grid line {}: {detail}", at + 1));
        let mut cfg = AugmentConfig::normalize_only();
        if line != "none" {
            for tok in line.split(',') {
                let (key, value) = tok
                    .trim()
                    .split_once('=')
                    .ok_or_else(|| bad(format!("expected key=on|off, got {tok:?}")))?;
                let value = parse_onoff(key.trim(), value.trim())?;
                match key.trim() {
                    "symmetrize" => cfg.symmetrize = value,
                    "mult_pixels" => cfg.mult_pixels = value,
                    "mult_adjust_z" => cfg.mult_adjust_z = value,
                    "gp_noise" => cfg.gp_noise = value,
                    other => return Err(bad(format!("unknown augmentation {other:?}"))),
                }
            }
        }
        cfg.validate()?;
        rows.push(cfg);
    }
    if rows.is_empty() {
        return Err(Error::Config("ablation grid has no rows".into()));
    }
    Ok(rows)
}

fn cmd_preview(
    data: &Path,
    count: Option<usize>,
    seed: &SeedFlag,
    out: &Path,
    s: &Settings,
) -> Result<()> {
    let seed = resolve_seed(seed, s)?;
    let count = count.unwrap_or(4);
    require_file("data", data)?;
    let ds = load_dataset(data)?;
    let count = count.min(ds.examples.len());
    if count == 0 {
        return Err(Error::Config("dataset has no examples to preview".into()));
    }
    // Raw-height rendering: normalization would destroy the meter scale the
    // preview is meant to show.
    let cfg = AugmentConfig { normalize: false, ..AugmentConfig::default() };
    let stats = NormStats::new(0.0, 1.0)?;
    fs::create_dir_all(out)?;
    let mut csv = String::from("image_id,flip_v,flip_h,mult_factor,gp_applied\n");
    for ex in &ds.examples[..count] {
        let mut rng = example_stream(seed, ex.image_id, 0);
        let (after, _, _, trace) = apply_pipeline(ex, &cfg, &stats, &mut rng)?;
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &px in ex.image.iter().chain(after.iter()) {
            lo = lo.min(px);
            hi = hi.max(px);
        }
        if !(hi > lo) {
            hi = lo + 1e-6;
        }
        let name = |stage: &str| out.join(format!("example_{:06}_{stage}.pgm", ex.image_id));
        write_pgm16(name("before"), &ex.image, IMAGE_SIDE, IMAGE_SIDE, lo, hi)?;
        write_pgm16(name("after"), &after, IMAGE_SIDE, IMAGE_SIDE, lo, hi)?;
        let factor = trace.mult_factor.map(|f| f.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            ex.image_id,
            trace.flip_v as u8,
            trace.flip_h as u8,
            factor,
            trace.gp_applied as u8
        ));
    }
    fs::write(out.join("preview.csv"), csv)?;
    write_manifest(out)?;
    println!("wrote before/after pairs for {count} examples to {}", out.display());
    Ok(())
}

fn cmd_gradcheck(seed: &SeedFlag, trials: Option<usize>, s: &Settings) -> Result<()> {
    let seed = resolve_seed(seed, s)?;
    let trials = trials.unwrap_or(100);
    if trials == 0 {
        return Err(Error::Config("trials must be positive".into()));
    }
    let results = gradient_check_suite(seed, trials)?;
    let mut worst = 0.0f64;
    for (name, err) in &results {
        println!("{name:<24} max relative error {err:.3e}");
        worst = worst.max(*err);
    }
    if worst < GRAD_TOLERANCE {
        println!("all gradients within {GRAD_TOLERANCE:.0e} over {trials} trials");
        Ok(())
    } else {
        Err(Error::contract(
            "gradcheck",
            format!("worst relative error {worst:.3e} exceeds {GRAD_TOLERANCE:.0e}"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_parse_and_lookup() {
        let dir = std::env::temp_dir().join(format!("gf-cli-settings-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        fs::write(&path, "# comment\n[run]\nseed = 7\n[train]\nepochs=3 # inline\n").unwrap();
        let s = Settings::load(Some(&path)).unwrap();
        assert_eq!(s.get("run", "seed"), Some("7"));
        assert_eq!(s.parse::<usize>("train", "epochs").unwrap(), Some(3));
        assert_eq!(s.get("train", "base_lr"), None);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn settings_reject_unknown_keys_and_orphans() {
        let dir = std::env::temp_dir().join(format!("gf-cli-badcfg-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.cfg");
        for text in ["[run]\nsneed=1\n", "[nope]\n", "seed=1\n"] {
            fs::write(&path, text).unwrap();
            assert!(Settings::load(Some(&path)).is_err(), "accepted {text:?}");
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn onoff_values() {
        assert!(parse_onoff("x", "on").unwrap());
        assert!(!parse_onoff("x", "off").unwrap());
        assert!(parse_onoff("x", "maybe").is_err());
    }

    #[test]
    fn grid_rows_parse() {
        let rows = parse_grid_rows("# ladder\nnone\nsymmetrize=on\nsymmetrize=on,gp_noise=on\n")
            .unwrap();
        assert_eq!(rows.len(), 3);
        assert!(!rows[0].symmetrize && !rows[0].gp_noise);
        assert!(rows[1].symmetrize);
        assert!(rows[2].gp_noise);
        assert!(rows.iter().all(|r| r.normalize));
        assert!(parse_grid_rows("tilt=on\n").is_err());
        assert!(parse_grid_rows("\n# only comments\n").is_err());
    }

    #[test]
    fn model_section_overrides_defaults() {
        let s = Settings { map: BTreeMap::new() };
        let cfg = resolve_model_config(9, &s).unwrap();
        assert_eq!(cfg.init_seed, 9);
        assert_eq!(cfg, ModelConfig { init_seed: 9, ..ModelConfig::default() });

        let mut map = BTreeMap::new();
        map.insert(("model".to_string(), "head".to_string()), "16,2".to_string());
        map.insert(("model".to_string(), "init_seed".to_string()), "3".to_string());
        let cfg = resolve_model_config(9, &Settings { map }).unwrap();
        assert_eq!(cfg.head, vec![16, 2]);
        assert_eq!(cfg.init_seed, 3, "explicit init_seed wins over the run seed");
    }

    #[test]
    fn help_and_bad_flag_exit_codes() {
        assert_eq!(run(["graspflow", "--help"]), 0);
        assert_eq!(run(["graspflow", "split", "--bogus"]), 1);
        assert_eq!(run(["graspflow", "no-such-command"]), 1);
    }
}
