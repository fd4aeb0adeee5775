//! Train the same model under a ladder of augmentation combinations and
//! tabulate validation accuracy per rung.

use graspflow::augment::AugmentConfig;
use graspflow::data::{generate_synthetic, SceneParams, SplitKind, SplitSpec};
use graspflow::eval::{ablation_csv, ablation_grid};
use graspflow::model::{ConvSpec, LayerSpec, ModelConfig};
use graspflow::optim::TrainConfig;
use graspflow::Result;

fn main() -> Result<()> {
    let ds = generate_synthetic(&SceneParams { seed: 12, ..SceneParams::default() }, 400)?;
    let spec = SplitSpec::new(SplitKind::Object, 0.8, 12)?;

    let mut rung = AugmentConfig::normalize_only();
    let mut rows = vec![rung];
    rung.symmetrize = true;
    rows.push(rung);
    rung.mult_pixels = true;
    rung.mult_adjust_z = true;
    rows.push(rung);
    rung.gp_noise = true;
    rows.push(rung);

    let conv = |f, k| LayerSpec::Conv(ConvSpec::new(f, k));
    let model_cfg = ModelConfig {
        image_tower: vec![conv(4, 3), LayerSpec::MaxPool { window: 4, stride: 4 }],
        merge_channels: 2,
        merge_conv: ConvSpec::new(8, 3),
        post_merge: vec![ConvSpec::new(8, 3), ConvSpec::new(8, 3)],
        head: vec![16, 2],
        input_size: 32,
        init_seed: 12,
    };
    let train_cfg = TrainConfig { epochs: 2, batch_size: 32, base_lr: 1e-3, seed: 12, ..TrainConfig::default() };

    let table = ablation_grid::<f32>(&ds, &model_cfg, &rows, &train_cfg, &spec)?;
    print!("{}", ablation_csv(&table));
    Ok(())
}
