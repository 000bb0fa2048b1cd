#![allow(dead_code)]

use std::path::Path;

use deblurgan::blur::{apply_blur, make_linear_kernel};
use deblurgan::imaging::save_image;
use deblurgan::scenes::random_scene;
use deblurgan::trainer::TrainConfig;

/// Writes `n` blurred/sharp scene pairs of `size × size` under `root`.
pub fn write_dataset(root: &Path, n: usize, size: usize, seed: u64) {
    for i in 0..n {
        let sharp = random_scene(size, size, seed + i as u64);
        let k = make_linear_kernel(7, 25.0 * i as f64, 7).unwrap();
        let name = format!("p{i:03}.png");
        save_image(&apply_blur(&sharp, &k), root.join("blur").join(&name)).unwrap();
        save_image(&sharp, root.join("sharp").join(&name)).unwrap();
    }
}

/// A narrow configuration that trains in well under a second per step.
pub fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    for (k, v) in [
        ("g_base_channels", "8"),
        ("g_resnet_blocks", "2"),
        ("patch_size", "64"),
        ("batch_size", "2"),
        ("learning_rate", "0.0002"),
        ("epochs", "1"),
        ("val_max_pairs", "2"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}
