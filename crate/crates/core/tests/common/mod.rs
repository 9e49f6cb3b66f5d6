#![allow(dead_code)]

use mpae::datagen::{generate_scenes, split_seeds, LabeledScene, SceneSpec};
use mpae::tensors_io::RunConfig;

/// Small enough that a step takes a few milliseconds.
pub fn tiny_config() -> RunConfig {
    RunConfig {
        num_parts: 2,
        dim: 8,
        patch_size: 4,
        input_height: 16,
        input_width: 16,
        mask_ratio: 0.5,
        group_size: 2,
        batch_size: 4,
        mlp_ratio: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        descriptor_layers: 1,
        steps: 10,
        ckpt_every: 5,
        entropy_per_pixel: true,
        ..RunConfig::default()
    }
}

pub fn tiny_scenes(count: usize) -> Vec<LabeledScene> {
    generate_scenes(&split_seeds(false, count), &SceneSpec::toy(16, 16, 2)).unwrap()
}

pub fn tiny_eval_scenes(count: usize) -> Vec<LabeledScene> {
    generate_scenes(&split_seeds(true, count), &SceneSpec::toy(16, 16, 2)).unwrap()
}
