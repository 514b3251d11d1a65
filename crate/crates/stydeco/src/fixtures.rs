//! The bundled procedural source corpus and the pinned smoke config.

use std::path::{Path, PathBuf};

use stydeco_core::config::ExperimentConfig;
use stydeco_core::generator::GeneratorConfig;
use stydeco_core::synth::procedural_scene;
use stydeco_core::text::TextEncoderConfig;

use crate::error::Result;
use crate::imageio::save_image;

pub const FIXTURE_COUNT: usize = 16;
pub const FIXTURE_SIZE: usize = 64;

/// Writes `count` procedural scenes as `scene_NN.png` into `dir`.
pub fn write_source_corpus(dir: &Path, count: usize, size: usize) -> Result<Vec<PathBuf>> {
    (0..count)
        .map(|i| {
            let p = dir.join(format!("scene_{i:02}.png"));
            save_image(&procedural_scene(i as u64, size), &p)?;
            Ok(p)
        })
        .collect()
}

/// The small fast configuration used by the smoke run and the acceptance
/// checks: 32 px images, a narrow generator and a higher learning rate so
/// 200 steps make visible progress on one CPU core.
pub fn smoke_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        image_size: 32,
        train_steps: 200,
        batch_size: 2,
        lr: 1e-3,
        seed: 42,
        checkpoint_every: 100,
        text_encoder: TextEncoderConfig::default(),
        generator: GeneratorConfig {
            vae_channels: vec![16, 32, 64],
            unet_channels: 32,
            ..GeneratorConfig::default()
        },
        ..ExperimentConfig::default()
    };
    cfg.prompts.source_paraphrases = vec!["a real photo".into(), "an ordinary snapshot".into()];
    cfg.prompts.target_paraphrases = vec!["a Van Gogh painting".into(), "swirling impasto brushwork".into()];
    cfg
}
