//! Seeded fixtures shared by the benchmarks.

use mvar_core::harness::train::Example;
use mvar_core::{ModelConfig, ScaleSchedule, TokenMapPyramid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LENGTHS: [usize; 5] = [256, 512, 1024, 2048, 4096];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniformly random token pyramids with cycling class labels.
pub fn random_examples(config: &ModelConfig, n: usize, seed: u64) -> Vec<Example> {
    let mut rng = rng(seed);
    (0..n)
        .map(|i| {
            let maps = config
                .schedule
                .sides()
                .iter()
                .map(|&s| (0..s * s).map(|_| rng.random_range(0..config.vocab as u32)).collect())
                .collect();
            Example {
                pyramid: TokenMapPyramid::new(config.schedule.clone(), maps).unwrap(),
                class_id: i % config.n_classes,
            }
        })
        .collect()
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig::with_shape(ScaleSchedule::tiny(), 64, 4, 64, 8)
}
