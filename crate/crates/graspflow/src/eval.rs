//! Accuracy, reliability-diagram calibration with an ECE summary, ablation
//! grids over augmentation flags, and CSV/SVG report emission.
//!
//! Pure functions over prediction arrays; bucket sums use compensated
//! summation so worked-example tolerances hold at 1e-12. The decision
//! threshold is 0.5 with probability exactly one-half counted as success.

use std::path::Path;

use crate::augment::{compute_norm_stats, AugmentConfig};
use crate::data::{split, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{split_accuracy, train, EpochRecord, TrainConfig};
use crate::scalar::Scalar;

/// Percent of examples where (prob ≥ 0.5) matches the label.
pub fn accuracy(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::contract("accuracy", "no predictions to score"));
    }
    if probs.len() != labels.len() {
        return Err(Error::dimension(
            "accuracy",
            format!("{} probabilities for {} labels", probs.len(), labels.len()),
        ));
    }
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| u8::from(p >= 0.5) == l)
        .count();
    Ok(hits as f64 * 100.0 / probs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bucket {
    pub lo: f64,
    pub hi: f64,
    /// Mean predicted probability; 0 when the bucket is empty.
    pub mean_pred: f64,
    /// Empirical success frequency; 0 when the bucket is empty.
    pub freq: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub buckets: Vec<Bucket>,
    /// Σ (countᵢ/N)·|mean_predᵢ − freqᵢ| over nonempty buckets.
    pub ece: f64,
    pub n_buckets: usize,
}

/// Compensated (Kahan) sum; bitwise deterministic for a fixed order.
fn kahan_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut carry = 0.0;
    for v in values {
        let y = v - carry;
        let t = sum + y;
        carry = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Equal-width buckets over [0,1], right-open except the last.
pub fn calibration(probs: &[f64], labels: &[u8], n_buckets: usize) -> Result<CalibrationReport> {
    if probs.is_empty() {
        return Err(Error::contract("calibration", "no predictions to bucket"));
    }
    if probs.len() != labels.len() {
        return Err(Error::dimension(
            "calibration",
            format!("{} probabilities for {} labels", probs.len(), labels.len()),
        ));
    }
    if n_buckets < 2 {
        return Err(Error::contract(
            "calibration",
            format!("need at least 2 buckets, got {n_buckets}"),
        ));
    }
    for &p in probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::contract(
                "calibration",
                format!("probability {p} outside [0, 1]"),
            ));
        }
    }
    let mut pred: Vec<Vec<f64>> = vec![Vec::new(); n_buckets];
    let mut pos: Vec<usize> = vec![0; n_buckets];
    for (&p, &l) in probs.iter().zip(labels) {
        let i = ((p * n_buckets as f64) as usize).min(n_buckets - 1);
        pred[i].push(p);
        pos[i] += usize::from(l == 1);
    }
    let n = probs.len() as f64;
    let mut buckets = Vec::with_capacity(n_buckets);
    let mut ece_terms = Vec::new();
    for i in 0..n_buckets {
        let count = pred[i].len();
        let (mean_pred, freq) = if count == 0 {
            (0.0, 0.0)
        } else {
            (
                kahan_sum(pred[i].iter().copied()) / count as f64,
                pos[i] as f64 / count as f64,
            )
        };
        if count > 0 {
            ece_terms.push(count as f64 / n * (mean_pred - freq).abs());
        }
        buckets.push(Bucket {
            lo: i as f64 / n_buckets as f64,
            hi: (i + 1) as f64 / n_buckets as f64,
            mean_pred,
            freq,
            count,
        });
    }
    Ok(CalibrationReport { buckets, ece: kahan_sum(ece_terms), n_buckets })
}

pub const CALIBRATION_HEADER: &str = "lo,hi,mean_pred,freq,count";

pub fn calibration_csv(report: &CalibrationReport) -> String {
    let mut out = String::from(CALIBRATION_HEADER);
    out.push('\n');
    for b in &report.buckets {
        out.push_str(&format!("{},{},{},{},{}\n", b.lo, b.hi, b.mean_pred, b.freq, b.count));
    }
    out
}

/// Rebuilds the full report; ECE is recomputed from the bucket rows, which
/// reproduces the original bit-for-bit because field serialization is
/// shortest-round-trip.
pub fn parse_calibration_csv(text: &str) -> Result<CalibrationReport> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CALIBRATION_HEADER => {}
        other => {
            return Err(Error::Config(format!(
                "calibration header {other:?}, want {CALIBRATION_HEADER:?}"
            )))
        }
    }
    let mut buckets = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Config(format!(
                "calibration row {} has {} fields, want 5",
                i + 2,
                fields.len()
            )));
        }
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad calibration number {s:?} on row {}", i + 2)))
        };
        buckets.push(Bucket {
            lo: num(fields[0])?,
            hi: num(fields[1])?,
            mean_pred: num(fields[2])?,
            freq: num(fields[3])?,
            count: num(fields[4])? as usize,
        });
    }
    if buckets.is_empty() {
        return Err(Error::Config("calibration CSV holds no buckets".into()));
    }
    let n: usize = buckets.iter().map(|b| b.count).sum();
    let ece_terms: Vec<f64> = buckets
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n as f64 * (b.mean_pred - b.freq).abs())
        .collect();
    let n_buckets = buckets.len();
    Ok(CalibrationReport { buckets, ece: kahan_sum(ece_terms), n_buckets })
}

/// One trained configuration in an augmentation ablation, accuracies in
/// percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub symmetrize: bool,
    pub mult_pixels: bool,
    pub mult_adjust_z: bool,
    pub gp_noise: bool,
    pub val_acc: f64,
    pub train_acc: f64,
    pub seed: u64,
}

/// Trains one model per augmentation row with identical seeds, so the only
/// difference between rows is the augmentation itself. Accuracies are
/// measured by a fresh eval pass (normalization only), which also covers
/// the epochs=0 untrained anchor.
pub fn ablation_grid<T: Scalar>(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    rows: &[AugmentConfig],
    train_cfg: &TrainConfig,
    split_spec: &SplitSpec,
) -> Result<Vec<AblationRow>> {
    for aug in rows {
        aug.validate()?;
    }
    let (train_idx, val_idx) = split(dataset, split_spec)?;
    let train_images: Vec<&[f32]> =
        train_idx.iter().map(|&i| dataset.examples[i].image.as_slice()).collect();
    let stats = compute_norm_stats(&train_images)?;
    let mut out = Vec::with_capacity(rows.len());
    for aug in rows {
        let mut model = Model::<T>::build(model_cfg)?;
        train(&mut model, dataset, &train_idx, &val_idx, aug, train_cfg, |_| {})?;
        let train_acc =
            split_accuracy(&mut model, dataset, &train_idx, &stats, train_cfg.batch_size)?;
        let val_acc =
            split_accuracy(&mut model, dataset, &val_idx, &stats, train_cfg.batch_size)?;
        out.push(AblationRow {
            symmetrize: aug.symmetrize,
            mult_pixels: aug.mult_pixels,
            mult_adjust_z: aug.mult_adjust_z,
            gp_noise: aug.gp_noise,
            val_acc: val_acc * 100.0,
            train_acc: train_acc * 100.0,
            seed: train_cfg.seed,
        });
    }
    Ok(out)
}

pub const ABLATION_HEADER: &str = "symmetrize,mult_pixels,mult_adjust_z,gp_noise,val_acc,train_acc,seed";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            u8::from(r.symmetrize),
            u8::from(r.mult_pixels),
            u8::from(r.mult_adjust_z),
            u8::from(r.gp_noise),
            r.val_acc,
            r.train_acc,
            r.seed
        ));
    }
    out
}

pub fn parse_ablation_csv(text: &str) -> Result<Vec<AblationRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == ABLATION_HEADER => {}
        other => {
            return Err(Error::Config(format!(
                "ablation header {other:?}, want {ABLATION_HEADER:?}"
            )))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Config(format!(
                "ablation row {} has {} fields, want 7",
                i + 2,
                fields.len()
            )));
        }
        let flag = |s: &str| match s.trim() {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(Error::Config(format!("bad ablation flag {other:?} on row {}", i + 2))),
        };
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad ablation number {s:?} on row {}", i + 2)))
        };
        out.push(AblationRow {
            symmetrize: flag(fields[0])?,
            mult_pixels: flag(fields[1])?,
            mult_adjust_z: flag(fields[2])?,
            gp_noise: flag(fields[3])?,
            val_acc: num(fields[4])?,
            train_acc: num(fields[5])?,
            seed: num(fields[6])? as u64,
        });
    }
    Ok(out)
}

const SVG_W: f64 = 640.0;
const PLOT_X: f64 = 80.0;
const PLOT_W: f64 = 500.0;

fn svg_open(height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{height}\" \
         viewBox=\"0 0 {SVG_W} {height}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{SVG_W}\" height=\"{height}\" fill=\"white\"/>\n"
    )
}

/// Reliability diagram over a count histogram: the calibration curve plots
/// each nonempty bucket's empirical frequency against its mean prediction,
/// with the diagonal as the perfect-calibration reference; the histogram
/// keeps zero-height bars for empty buckets.
pub fn calibration_svg(report: &CalibrationReport) -> String {
    let (top_y, top_h) = (40.0, 300.0);
    let (bot_y, bot_h) = (400.0, 180.0);
    let height = bot_y + bot_h + 60.0;
    let fx = |v: f64| PLOT_X + v * PLOT_W;
    let fy = |v: f64| top_y + (1.0 - v) * top_h;
    let mut s = svg_open(height);
    s.push_str(&format!(
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">calibration: empirical frequency vs mean predicted probability (ECE {:.4})</text>\n",
        SVG_W / 2.0,
        report.ece
    ));
    s.push_str(&format!(
        "<rect x=\"{PLOT_X}\" y=\"{top_y}\" width=\"{PLOT_W}\" height=\"{top_h}\" fill=\"none\" stroke=\"black\"/>\n"
    ));
    s.push_str(&format!(
        "<line class=\"diagonal\" x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"gray\" stroke-dasharray=\"6,4\"/>\n",
        fx(0.0), fy(0.0), fx(1.0), fy(1.0)
    ));
    let filled: Vec<&Bucket> = report.buckets.iter().filter(|b| b.count > 0).collect();
    let points: Vec<String> =
        filled.iter().map(|b| format!("{:.2},{:.2}", fx(b.mean_pred), fy(b.freq))).collect();
    s.push_str(&format!(
        "<polyline class=\"curve\" points=\"{}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\"/>\n",
        points.join(" ")
    ));
    for p in &points {
        let (x, y) = p.split_once(',').unwrap();
        s.push_str(&format!(
            "<circle cx=\"{x}\" cy=\"{y}\" r=\"3\" fill=\"steelblue\"/>\n"
        ));
    }
    for t in [0.0, 0.5, 1.0] {
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{t}</text>\n",
            PLOT_X - 6.0,
            fy(t) + 4.0
        ));
    }
    // Bottom subplot: counts per bucket, empty buckets kept as zero bars.
    let max_count = report.buckets.iter().map(|b| b.count).max().unwrap_or(0).max(1) as f64;
    s.push_str(&format!(
        "<rect x=\"{PLOT_X}\" y=\"{bot_y}\" width=\"{PLOT_W}\" height=\"{bot_h}\" fill=\"none\" stroke=\"black\"/>\n"
    ));
    for b in &report.buckets {
        let h = b.count as f64 / max_count * (bot_h - 10.0);
        let x0 = fx(b.lo);
        let w = (fx(b.hi) - x0) * 0.9;
        s.push_str(&format!(
            "<rect class=\"bar\" x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"darkseagreen\" stroke=\"black\"/>\n",
            x0 + (fx(b.hi) - x0) * 0.05,
            bot_y + bot_h - h,
            w,
            h
        ));
    }
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">predicted probability bucket counts</text>\n",
        SVG_W / 2.0,
        bot_y + bot_h + 30.0
    ));
    s.push_str("</svg>\n");
    s
}

/// Accuracy-vs-epoch curves for the training and validation streams.
pub fn history_svg(history: &[EpochRecord]) -> String {
    let (top_y, top_h) = (40.0, 420.0);
    let height = top_y + top_h + 80.0;
    let max_epoch = history.iter().map(|r| r.epoch).max().unwrap_or(1).max(1) as f64;
    let fx = |e: f64| PLOT_X + (e - 1.0) / (max_epoch - 1.0).max(1.0) * PLOT_W;
    let fy = |acc: f64| top_y + (1.0 - acc) * top_h;
    let mut s = svg_open(height);
    s.push_str(&format!(
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">accuracy vs epoch</text>\n",
        SVG_W / 2.0
    ));
    s.push_str(&format!(
        "<rect x=\"{PLOT_X}\" y=\"{top_y}\" width=\"{PLOT_W}\" height=\"{top_h}\" fill=\"none\" stroke=\"black\"/>\n"
    ));
    for (name, color, f) in [
        ("train", "darkorange", (&|r: &EpochRecord| r.train_acc) as &dyn Fn(&EpochRecord) -> f64),
        ("validation", "steelblue", &|r: &EpochRecord| r.val_acc),
    ] {
        let points: Vec<String> = history
            .iter()
            .map(|r| format!("{:.2},{:.2}", fx(r.epoch as f64), fy(f(r))))
            .collect();
        s.push_str(&format!(
            "<polyline class=\"{name}\" points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            points.join(" ")
        ));
    }
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" fill=\"darkorange\">train</text>\n",
        PLOT_X + 10.0,
        top_y + 20.0
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" fill=\"steelblue\">validation</text>\n",
        PLOT_X + 10.0,
        top_y + 36.0
    ));
    for t in [0.0, 0.5, 1.0] {
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{t}</text>\n",
            PLOT_X - 6.0,
            fy(t) + 4.0
        ));
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_calibration_report<P: AsRef<Path>>(
    report: &CalibrationReport,
    csv_path: P,
    svg_path: P,
) -> Result<()> {
    std::fs::write(csv_path, calibration_csv(report))?;
    std::fs::write(svg_path, calibration_svg(report))?;
    Ok(())
}

pub fn write_history_report<P: AsRef<Path>>(
    history: &[EpochRecord],
    csv_path: P,
    svg_path: P,
) -> Result<()> {
    std::fs::write(csv_path, crate::optim::history_to_csv(history))?;
    std::fs::write(svg_path, history_svg(history))?;
    Ok(())
}
