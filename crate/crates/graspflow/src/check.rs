//! Self-check suite: finite-difference gradient verification of every
//! primitive and of the full scaled-down model.
//!
//! Inputs are drawn away from non-differentiable points — ReLU preactivations
//! keep a margin from zero, pool windows keep distinct entries, the model
//! runs at a shifted-norm point where every unit is provably active — so the
//! central differences measure the true derivative rather than a kink.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::rng::stream;
use crate::tensor::ops::{
    batchnorm, conv2d, dense, maxpool2d, mul, relu, softmax_cross_entropy, sum_all,
};
use crate::tensor::{grad_check, BatchNormState, Mode, Tensor};

/// Check stream tag ("CHK").
const TAG_CHECK: u64 = 0x43484b;

const EPSILON: f64 = 1e-5;

fn rng_for(seed: u64, trial: u64, op: u64) -> ChaCha8Rng {
    stream(seed, trial, op, TAG_CHECK)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| lo + (hi - lo) * rng.gen::<f64>()).collect()
}

/// Values with pairwise gaps ≥ 0.03 in random order: pooling argmaxes stay
/// unique under ±ε perturbation.
fn spaced(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 + rng.gen::<f64>() * 0.02).collect();
    v.shuffle(rng);
    v
}

fn sum_of_squares(y: &Tensor<f64>) -> Result<Tensor<f64>> {
    Ok(sum_all(&mul(y, y)?))
}

fn check_conv2d(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, c, o) = (rng.gen_range(1..3usize), rng.gen_range(1..3usize), rng.gen_range(1..3usize));
    let (h, w) = (rng.gen_range(2..6usize), rng.gen_range(2..6usize));
    let k = *[1usize, 3].choose(rng).unwrap();
    let (xn, wn) = (n * c * h * w, o * c * k * k);
    let mut point = uniform(rng, xn + wn, -1.0, 1.0);
    point.truncate(xn + wn);
    grad_check(
        &point,
        |p| {
            let x = Tensor::param(&[n, c, h, w], p[..xn].to_vec());
            let wt = Tensor::param(&[o, c, k, k], p[xn..].to_vec());
            let y = conv2d(&x, &wt)?;
            Ok((sum_of_squares(&y)?, vec![x, wt]))
        },
        EPSILON,
    )
}

fn check_maxpool(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, c) = (rng.gen_range(1..3usize), rng.gen_range(1..3usize));
    let size = *[2usize, 3].choose(rng).unwrap();
    let mult = rng.gen_range(1..3usize);
    let (h, w) = (size * mult, size * mult);
    let point = spaced(rng, n * c * h * w);
    grad_check(
        &point,
        |p| {
            let x = Tensor::param(&[n, c, h, w], p.to_vec());
            let y = maxpool2d(&x, size)?;
            Ok((sum_of_squares(&y)?, vec![x]))
        },
        EPSILON,
    )
}

fn check_dense(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, i, o) = (rng.gen_range(1..4usize), rng.gen_range(1..5usize), rng.gen_range(1..4usize));
    let (xn, wn) = (n * i, o * i);
    let point = uniform(rng, xn + wn + o, -1.0, 1.0);
    grad_check(
        &point,
        |p| {
            let x = Tensor::param(&[n, i], p[..xn].to_vec());
            let w = Tensor::param(&[o, i], p[xn..xn + wn].to_vec());
            let b = Tensor::param(&[o], p[xn + wn..].to_vec());
            let y = dense(&x, &w, &b)?;
            Ok((sum_of_squares(&y)?, vec![x, w, b]))
        },
        EPSILON,
    )
}

fn check_relu_chain(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, i, o) = (2usize, 3usize, 3usize);
    let (xn, wn) = (n * i, o * i);
    // Keep every preactivation at least 1e-2 from the ReLU kink.
    let point = loop {
        let p = uniform(rng, xn + wn + o, -1.0, 1.0);
        let x = Tensor::from_vec(&[n, i], p[..xn].to_vec());
        let w = Tensor::from_vec(&[o, i], p[xn..xn + wn].to_vec());
        let b = Tensor::from_vec(&[o], p[xn + wn..].to_vec());
        let pre = dense(&x, &w, &b)?;
        if pre.data().iter().all(|v| v.abs() > 1e-2) {
            break p;
        }
    };
    grad_check(
        &point,
        |p| {
            let x = Tensor::param(&[n, i], p[..xn].to_vec());
            let w = Tensor::param(&[o, i], p[xn..xn + wn].to_vec());
            let b = Tensor::param(&[o], p[xn + wn..].to_vec());
            let y = relu(&dense(&x, &w, &b)?);
            Ok((sum_of_squares(&y)?, vec![x, w, b]))
        },
        EPSILON,
    )
}

fn check_batchnorm(rng: &mut ChaCha8Rng, mode: Mode) -> Result<f64> {
    let (n, c, h, w) = (2usize, rng.gen_range(1..3usize), 2usize, 2usize);
    let xn = n * c * h * w;
    let point = {
        let mut p = uniform(rng, xn, -1.0, 1.0);
        p.extend(uniform(rng, c, 0.5, 1.5)); // scale
        p.extend(uniform(rng, c, -0.5, 0.5)); // shift
        p
    };
    let running_mean = uniform(rng, c, -0.3, 0.3);
    let running_var = uniform(rng, c, 0.5, 2.0);
    grad_check(
        &point,
        |p| {
            let x = Tensor::param(&[n, c, h, w], p[..xn].to_vec());
            let scale = Tensor::param(&[c], p[xn..xn + c].to_vec());
            let shift = Tensor::param(&[c], p[xn + c..].to_vec());
            let mut state = BatchNormState::new(c, 0.9, 1e-5)?;
            state.scale = scale.clone();
            state.shift = shift.clone();
            state.running_mean = running_mean.clone();
            state.running_var = running_var.clone();
            let y = batchnorm(&x, &mut state, mode)?;
            Ok((sum_of_squares(&y)?, vec![x, scale, shift]))
        },
        EPSILON,
    )
}

fn check_softmax_ce(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.gen_range(2..5usize);
    let point = uniform(rng, n * 2, -2.0, 2.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2usize)).collect();
    grad_check(
        &point,
        |p| {
            let logits = Tensor::param(&[n, 2], p.to_vec());
            let loss = softmax_cross_entropy(&logits, &labels)?;
            Ok((loss, vec![logits]))
        },
        EPSILON,
    )
}

/// Point where every ReLU in the model is provably active: norm shift 4 with
/// scale 1/2 bounds each post-norm preactivation below by
/// 4 − 0.5·sqrt(M−1) > 0 for the batch sizes used here.
fn model_smooth_point(model: &Model<f64>) -> Vec<f64> {
    let mut point = model.flatten_trainable();
    let mut at = 0;
    for name in model.trainable_names() {
        let numel = model.get_trainable(&name).unwrap().numel();
        if name.ends_with(".bn.scale") {
            point[at..at + numel].fill(0.5);
        } else if name.ends_with(".bn.shift") {
            point[at..at + numel].fill(4.0);
        }
        at += numel;
    }
    point
}

fn check_full_model(rng: &mut ChaCha8Rng, trial: u64) -> Result<f64> {
    let cfg = ModelConfig::tiny(trial);
    let base = Model::<f64>::build(&cfg)?;
    let point = model_smooth_point(&base);
    let n = 3;
    let images = Tensor::from_vec(&[n, 1, 4, 4], uniform(rng, n * 16, 0.0, 0.08));
    let z = Tensor::from_vec(&[n], uniform(rng, n, 0.0, 0.05));
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2usize)).collect();
    grad_check(
        &point,
        |p| {
            let mut model = Model::<f64>::from_flat(&cfg, p)?;
            let cover = model.trainable_tensors();
            let logits = model.forward_logits(&images, &z, Mode::Train)?;
            let loss = softmax_cross_entropy(&logits, &labels)?;
            Ok((loss, cover))
        },
        EPSILON,
    )
}

/// Runs `trials` seeded gradient checks per primitive and for the full
/// tiny-config model; returns each check's worst relative error.
pub fn gradient_check_suite(seed: u64, trials: usize) -> Result<Vec<(String, f64)>> {
    let mut worst: Vec<(String, f64)> = [
        "conv2d",
        "maxpool2d",
        "dense",
        "relu-chain",
        "batchnorm-train",
        "batchnorm-eval",
        "softmax-cross-entropy",
        "full-model",
    ]
    .iter()
    .map(|s| (s.to_string(), 0.0))
    .collect();
    for trial in 0..trials as u64 {
        let errs = [
            check_conv2d(&mut rng_for(seed, trial, 0))?,
            check_maxpool(&mut rng_for(seed, trial, 1))?,
            check_dense(&mut rng_for(seed, trial, 2))?,
            check_relu_chain(&mut rng_for(seed, trial, 3))?,
            check_batchnorm(&mut rng_for(seed, trial, 4), Mode::Train)?,
            check_batchnorm(&mut rng_for(seed, trial, 5), Mode::Eval)?,
            check_softmax_ce(&mut rng_for(seed, trial, 6))?,
            check_full_model(&mut rng_for(seed, trial, 7), trial)?,
        ];
        for (slot, err) in worst.iter_mut().zip(errs) {
            slot.1 = slot.1.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_across_trials() {
        let results = gradient_check_suite(1, 3).unwrap();
        assert_eq!(results.len(), 8);
        for (name, err) in results {
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
