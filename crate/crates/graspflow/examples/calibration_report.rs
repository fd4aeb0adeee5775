//! Bucket predicted probabilities against empirical success frequencies and
//! render a reliability diagram for a quickly trained model.

use graspflow::augment::{compute_norm_stats, normalize, AugmentConfig};
use graspflow::data::{generate_synthetic, split, SceneParams, SplitKind, SplitSpec, IMAGE_SIDE};
use graspflow::eval::{calibration, write_calibration_report};
use graspflow::model::{ConvSpec, LayerSpec, Model, ModelConfig};
use graspflow::optim::{train, TrainConfig};
use graspflow::scalar::Scalar;
use graspflow::tensor::{Mode, Tensor};
use graspflow::Result;

fn main() -> Result<()> {
    let ds = generate_synthetic(&SceneParams { seed: 4, ..SceneParams::default() }, 600)?;
    let spec = SplitSpec::new(SplitKind::Image, 0.8, 4)?;
    let (train_idx, val_idx) = split(&ds, &spec)?;

    let conv = |f, k| LayerSpec::Conv(ConvSpec::new(f, k));
    let cfg = ModelConfig {
        image_tower: vec![conv(8, 5), LayerSpec::MaxPool { window: 4, stride: 4 }],
        merge_channels: 4,
        merge_conv: ConvSpec::new(8, 3),
        post_merge: vec![ConvSpec::new(8, 3), ConvSpec::new(8, 3)],
        head: vec![16, 2],
        input_size: 32,
        init_seed: 4,
    };
    let mut model = Model::<f32>::build(&cfg)?;
    let tcfg = TrainConfig { epochs: 3, batch_size: 32, base_lr: 1e-3, seed: 4, ..TrainConfig::default() };
    train(&mut model, &ds, &train_idx, &val_idx, &AugmentConfig::default(), &tcfg, |_| {})?;

    // Success probabilities over the validation split, using train-split
    // normalization statistics.
    let images: Vec<&[f32]> =
        train_idx.iter().map(|&i| ds.examples[i].image.as_slice()).collect();
    let stats = compute_norm_stats(&images)?;
    let mut probs = Vec::with_capacity(val_idx.len());
    for chunk in val_idx.chunks(128) {
        let mut data = Vec::with_capacity(chunk.len() * IMAGE_SIDE * IMAGE_SIDE);
        let mut zs = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let mut image = ds.examples[i].image.clone();
            normalize(&mut image, &stats);
            data.extend(image.iter().map(|&v| v));
            zs.push(ds.examples[i].z);
        }
        let images = Tensor::from_vec(&[chunk.len(), 1, IMAGE_SIDE, IMAGE_SIDE], data);
        let z = Tensor::from_vec(&[chunk.len()], zs);
        let p = model.forward(&images, &z, Mode::Eval)?;
        probs.extend(p.data().iter().map(|&v| Scalar::to_f64(v)));
    }
    let labels: Vec<u8> = val_idx.iter().map(|&i| ds.examples[i].label).collect();

    let report = calibration(&probs, &labels, 10)?;
    println!("bucket        mean_pred   freq    count");
    for b in &report.buckets {
        println!(
            "[{:.2}, {:.2})   {:>7.4}   {:>6.4}   {:>4}",
            b.lo, b.hi, b.mean_pred, b.freq, b.count
        );
    }
    println!("\nexpected calibration error: {:.4}", report.ece);

    let dir = std::env::temp_dir().join("graspflow-calibration");
    std::fs::create_dir_all(&dir)?;
    write_calibration_report(&report, &dir.join("calibration.csv"), &dir.join("calibration.svg"))?;
    println!("wrote report to {}", dir.display());
    Ok(())
}
