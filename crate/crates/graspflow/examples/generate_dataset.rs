//! Generate a synthetic grasp dataset, render one heightmap as ASCII art,
//! and round-trip the set through the on-disk format.

use graspflow::data::{generate_synthetic, load_dataset, save_dataset, SceneParams, IMAGE_SIDE};
use graspflow::Result;

fn main() -> Result<()> {
    let params = SceneParams { seed: 42, ..SceneParams::default() };
    let ds = generate_synthetic(&params, 500)?;

    let positives = ds.examples.iter().filter(|e| e.label == 1).count();
    println!("{} examples, {} labeled success", ds.examples.len(), positives);
    let mean_z = |label: u8| {
        let zs: Vec<f32> =
            ds.examples.iter().filter(|e| e.label == label).map(|e| e.z).collect();
        zs.iter().sum::<f32>() / zs.len() as f32
    };
    println!("mean grasp depth: {:.4} m on successes, {:.4} m on failures", mean_z(1), mean_z(0));

    let ex = &ds.examples[0];
    println!(
        "\nexample {} (object {}, pose {}): z = {:.4} m, label = {}",
        ex.image_id, ex.object_id, ex.pose_id, ex.z, ex.label
    );
    let (lo, hi) = ex.image.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let ramp: Vec<char> = " .:-=+*#%@".chars().collect();
    for row in ex.image.chunks(IMAGE_SIDE) {
        let line: String = row
            .iter()
            .map(|&v| {
                let unit = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
                ramp[((unit * (ramp.len() - 1) as f32).round()) as usize]
            })
            .collect();
        println!("{line}");
    }

    let path = std::env::temp_dir().join("graspflow-example-dataset.gfd");
    save_dataset(&ds, &path)?;
    let reloaded = load_dataset(&path)?;
    assert_eq!(reloaded.examples.len(), ds.examples.len());
    assert_eq!(reloaded.examples[0].image, ds.examples[0].image);
    println!("\nround-tripped {} examples through {}", reloaded.examples.len(), path.display());
    Ok(())
}
