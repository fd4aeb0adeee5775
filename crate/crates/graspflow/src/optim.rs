//! Adam with a staircase learning-rate decay and L2 weight decay, plus the
//! epoch-driven training loop.
//!
//! Moments are kept in f64 regardless of the model's scalar type, and every
//! source of randomness (batch order, per-example augmentation) is a keyed
//! stream, so a run is bit-reproducible from its seed alone. The step
//! counter counts optimizer calls, not epochs.

use indexmap::IndexMap;
use rand::seq::SliceRandom;

use crate::augment::{apply_pipeline, compute_norm_stats, AugmentConfig, NormStats};
use crate::data::{Dataset, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{example_stream, stream};
use crate::scalar::Scalar;
use crate::tensor::ops::softmax_cross_entropy;
use crate::tensor::{Mode, Tensor};

/// Batch-order stream tag ("BAT").
const TAG_BATCH: u64 = 0x424154;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            base_lr: 1e-4,
            decay_factor: 0.95,
            decay_every: 50_000,
            weight_decay: 1e-5,
            batch_size: 128,
            epochs: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr {} must be positive", self.base_lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay_factor {} outside (0, 1]",
                self.decay_factor
            )));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay {} must be nonnegative",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Staircase decay: the rate drops by `decay_factor` after every
/// `decay_every` completed steps and is constant in between.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * cfg.decay_factor.powi((step / cfg.decay_every) as i32)
}

pub struct AdamState {
    step: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    first: IndexMap<String, Vec<f64>>,
    second: IndexMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> AdamState {
        AdamState {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Opens step t = step + 1; every parameter updated afterwards belongs
    /// to that step.
    pub fn begin_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    /// Bias-corrected Adam update of one named parameter, in place. Weight
    /// decay folds into the gradient before the moment updates.
    pub fn update(
        &mut self,
        t: u64,
        name: &str,
        w: &mut [f64],
        g: &[f64],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if g.len() != w.len() {
            return Err(Error::dimension(
                "adam_step",
                format!("{name}: gradient has {} values for {} weights", g.len(), w.len()),
            ));
        }
        let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; w.len()]);
        let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; w.len()]);
        if m.len() != w.len() {
            return Err(Error::dimension(
                "adam_step",
                format!("{name}: moment size {} does not match parameter size {}", m.len(), w.len()),
            ));
        }
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for i in 0..w.len() {
            let g_i = g[i] + weight_decay * w[i];
            if !g_i.is_finite() {
                return Err(Error::Train {
                    step: t,
                    context: name.to_string(),
                    detail: format!("non-finite gradient {} at element {i}", g[i]),
                });
            }
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g_i;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g_i * g_i;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState::new()
    }
}

/// One optimizer step over every trainable tensor of the model, consuming
/// the gradients recorded by the last backward pass.
pub fn adam_step<T: Scalar>(
    model: &mut Model<T>,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let t = state.begin_step();
    for name in model.trainable_names() {
        let tensor = model.get_trainable(&name).expect("manifest names exist");
        let shape = tensor.shape().to_vec();
        let grad = tensor.take_grad().ok_or_else(|| Error::Train {
            step: t,
            context: name.clone(),
            detail: "no gradient recorded; backward must run before the step".into(),
        })?;
        let mut w: Vec<f64> = tensor.data().iter().map(|x| Scalar::to_f64(*x)).collect();
        let g: Vec<f64> = grad.iter().map(|x| Scalar::to_f64(*x)).collect();
        state.update(t, &name, &mut w, &g, lr, weight_decay)?;
        let data: Vec<T> = w.iter().map(|&x| T::from_f64(x)).collect();
        model.replace_trainable(&name, Tensor::param(&shape, data))?;
    }
    Ok(())
}

/// One finished epoch, as written to the history CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed by the end of the epoch.
    pub step: u64,
    /// Rate applied at the epoch's final step.
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

/// Assembles a model-ready batch: pipelined images, depths, labels.
fn make_batch<T: Scalar>(
    dataset: &Dataset,
    idxs: &[usize],
    aug: &AugmentConfig,
    stats: &NormStats,
    seed: u64,
    epoch: u64,
) -> Result<(Tensor<T>, Tensor<T>, Vec<usize>)> {
    let n = idxs.len();
    let mut images = Vec::with_capacity(n * IMAGE_SIDE * IMAGE_SIDE);
    let mut depths = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for &i in idxs {
        let ex = &dataset.examples[i];
        let mut rng = example_stream(seed, ex.image_id, epoch);
        let (img, z, label, _) = apply_pipeline(ex, aug, stats, &mut rng)?;
        images.extend(img.iter().map(|&p| T::from_f64(p as f64)));
        depths.push(T::from_f64(z as f64));
        labels.push(label as usize);
    }
    Ok((
        Tensor::from_vec(&[n, 1, IMAGE_SIDE, IMAGE_SIDE], images),
        Tensor::from_vec(&[n], depths),
        labels,
    ))
}

/// Accuracy of eval-mode predictions over `idxs`, batched.
pub fn split_accuracy<T: Scalar>(
    model: &mut Model<T>,
    dataset: &Dataset,
    idxs: &[usize],
    stats: &NormStats,
    batch_size: usize,
) -> Result<f64> {
    let plain = AugmentConfig::normalize_only();
    let mut hits = 0usize;
    for chunk in idxs.chunks(batch_size) {
        let (images, z, labels) = make_batch::<T>(dataset, chunk, &plain, stats, 0, 0)?;
        let preds = model.predict(&images, &z)?;
        hits += preds.iter().zip(&labels).filter(|(p, l)| **p as usize == **l).count();
    }
    Ok(hits as f64 / idxs.len() as f64)
}

/// Epochs of shuffled mini-batches. Normalization statistics come from the
/// training split only; augmentation applies to the training stream only.
/// `sink` sees each epoch record as it completes.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    dataset: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    aug: &AugmentConfig,
    cfg: &TrainConfig,
    mut sink: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    aug.validate()?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Config(format!(
            "training needs nonempty splits, got {} train / {} validation examples",
            train_idx.len(),
            val_idx.len()
        )));
    }
    let train_images: Vec<&[f32]> =
        train_idx.iter().map(|&i| dataset.examples[i].image.as_slice()).collect();
    let stats = compute_norm_stats(&train_images)?;
    let mut adam = AdamState::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = train_idx.to_vec();
    for epoch in 1..=cfg.epochs {
        let mut rng = stream(cfg.seed, epoch as u64, 0, TAG_BATCH);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (images, z, labels) =
                make_batch::<T>(dataset, chunk, aug, &stats, cfg.seed, epoch as u64)?;
            let logits = model.forward_logits(&images, &z, Mode::Train)?;
            for (row, &label) in logits.data().chunks_exact(2).zip(&labels) {
                hits += usize::from((row[1] >= row[0]) == (label == 1));
            }
            let loss = softmax_cross_entropy(&logits, &labels)?;
            let loss_value = Scalar::to_f64(loss.data()[0]);
            if !loss_value.is_finite() {
                return Err(Error::Train {
                    step: adam.step() + 1,
                    context: format!("epoch {epoch}"),
                    detail: format!("loss diverged to {loss_value}"),
                });
            }
            loss_sum += loss_value * chunk.len() as f64;
            loss.backward()?;
            let lr = lr_at(adam.step(), cfg);
            adam_step(model, &mut adam, lr, cfg.weight_decay)?;
        }
        let record = EpochRecord {
            epoch,
            step: adam.step(),
            lr: lr_at(adam.step() - 1, cfg),
            train_loss: loss_sum / train_idx.len() as f64,
            train_acc: hits as f64 / train_idx.len() as f64,
            val_acc: split_accuracy(model, dataset, val_idx, &stats, cfg.batch_size)?,
        };
        sink(&record);
        history.push(record);
    }
    Ok(history)
}

pub const HISTORY_HEADER: &str = "epoch,step,lr,train_loss,train_acc,val_acc";

pub fn history_to_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.step, r.lr, r.train_loss, r.train_acc, r.val_acc
        ));
    }
    out
}

pub fn parse_history_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == HISTORY_HEADER => {}
        other => {
            return Err(Error::Config(format!(
                "history header {other:?}, want {HISTORY_HEADER:?}"
            )))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Config(format!(
                "history row {} has {} fields, want 6",
                i + 2,
                fields.len()
            )));
        }
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad history number {s:?} on row {}", i + 2)))
        };
        out.push(EpochRecord {
            epoch: num(fields[0])? as usize,
            step: num(fields[1])? as u64,
            lr: num(fields[2])?,
            train_loss: num(fields[3])?,
            train_acc: num(fields[4])?,
            val_acc: num(fields[5])?,
        });
    }
    Ok(out)
}
