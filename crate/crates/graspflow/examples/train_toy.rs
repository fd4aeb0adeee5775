//! Train a small model on a synthetic set, then round-trip the checkpoint
//! and confirm the reloaded model predicts identically.

use graspflow::data::{generate_synthetic, split, SceneParams, SplitKind, SplitSpec};
use graspflow::model::{ConvSpec, LayerSpec, Model, ModelConfig};
use graspflow::augment::AugmentConfig;
use graspflow::optim::{split_accuracy, train, TrainConfig};
use graspflow::augment::compute_norm_stats;
use graspflow::Result;

fn main() -> Result<()> {
    let ds = generate_synthetic(&SceneParams { seed: 7, ..SceneParams::default() }, 600)?;
    let spec = SplitSpec::new(SplitKind::Image, 0.8, 7)?;
    let (train_idx, val_idx) = split(&ds, &spec)?;

    let conv = |f, k| LayerSpec::Conv(ConvSpec::new(f, k));
    let model_cfg = ModelConfig {
        image_tower: vec![
            conv(8, 5),
            LayerSpec::MaxPool { window: 2, stride: 2 },
            conv(8, 3),
            LayerSpec::MaxPool { window: 2, stride: 2 },
        ],
        merge_channels: 4,
        merge_conv: ConvSpec::new(16, 3),
        post_merge: vec![ConvSpec::new(16, 3), ConvSpec::new(16, 3)],
        head: vec![32, 2],
        input_size: 32,
        init_seed: 7,
    };
    let mut model = Model::<f32>::build(&model_cfg)?;
    println!("{} trainable parameters", model.param_count());

    let train_cfg = TrainConfig { epochs: 3, batch_size: 32, base_lr: 1e-3, seed: 7, ..TrainConfig::default() };
    train(&mut model, &ds, &train_idx, &val_idx, &AugmentConfig::default(), &train_cfg, |r| {
        println!(
            "epoch {}  loss {:.4}  train {:.1}%  val {:.1}%",
            r.epoch,
            r.train_loss,
            r.train_acc * 100.0,
            r.val_acc * 100.0
        );
    })?;

    let path = std::env::temp_dir().join("graspflow-example-toy.gfm");
    model.save(&path)?;
    let mut reloaded = Model::<f32>::load(&path)?;
    let images: Vec<&[f32]> =
        train_idx.iter().map(|&i| ds.examples[i].image.as_slice()).collect();
    let stats = compute_norm_stats(&images)?;
    let before = split_accuracy(&mut model, &ds, &val_idx, &stats, 64)?;
    let after = split_accuracy(&mut reloaded, &ds, &val_idx, &stats, 64)?;
    assert_eq!(before, after, "reloaded checkpoint must predict identically");
    println!("checkpoint round trip preserves accuracy: {:.1}%", after * 100.0);
    Ok(())
}
