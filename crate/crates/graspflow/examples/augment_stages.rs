//! Apply each augmentation stage in isolation to one example and show what
//! changes; writes before/after images as 16-bit PGM files.

use graspflow::augment::{apply_pipeline, write_pgm16, AugmentConfig, NormStats};
use graspflow::data::{generate_synthetic, SceneParams, IMAGE_SIDE};
use graspflow::rng::example_stream;
use graspflow::Result;

fn main() -> Result<()> {
    let ds = generate_synthetic(&SceneParams { seed: 3, ..SceneParams::default() }, 8)?;
    let ex = &ds.examples[5];
    let stats = NormStats::new(0.0, 1.0)?; // unused: normalization stays off
    let off = AugmentConfig { normalize: false, symmetrize: false, mult_pixels: false, mult_adjust_z: false, gp_noise: false, ..AugmentConfig::default() };

    let stages = [
        ("flips", AugmentConfig { symmetrize: true, flip_prob: 1.0, ..off }),
        ("multiplicative", AugmentConfig { mult_pixels: true, mult_adjust_z: true, ..off }),
        ("grid-noise", AugmentConfig { gp_noise: true, gp_prob: 1.0, ..off }),
    ];
    let dir = std::env::temp_dir().join("graspflow-augment-stages");
    std::fs::create_dir_all(&dir)?;
    let (lo, hi) = ex.image.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    write_pgm16(dir.join("original.pgm"), &ex.image, IMAGE_SIDE, IMAGE_SIDE, lo, hi)?;

    println!("example {}: z = {:.4} m, heights in [{lo:.4}, {hi:.4}] m\n", ex.image_id, ex.z);
    for (name, cfg) in stages {
        let mut rng = example_stream(99, ex.image_id, 0);
        let (image, z, _, trace) = apply_pipeline(ex, &cfg, &stats, &mut rng)?;
        let moved = image
            .iter()
            .zip(&ex.image)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        println!(
            "{name:<15} flips (v {}, h {})  factor {:<22}  applied {}  z {:.4} m  max pixel change {:.5} m",
            trace.flip_v,
            trace.flip_h,
            trace.mult_factor.map(|f| f.to_string()).unwrap_or_else(|| "-".into()),
            trace.gp_applied,
            z,
            moved
        );
        write_pgm16(dir.join(format!("{name}.pgm")), &image, IMAGE_SIDE, IMAGE_SIDE, lo, hi)?;
    }
    println!("\nwrote images to {}", dir.display());
    Ok(())
}
