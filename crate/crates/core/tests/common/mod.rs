#![allow(dead_code)]

use lmn_core::ctr::{RunConfig, TrainConfig, Variant};
use lmn_core::data::{generate, SyntheticData, SyntheticSpec};
use lmn_core::memory::MemoryConfig;

/// About 1k training samples.
pub fn toy_data(seed: u64) -> SyntheticData {
    generate(&SyntheticSpec {
        users: 60,
        items: 80,
        clusters: 4,
        days: 8,
        seq_len: 6,
        impressions_per_day: 3,
        cross_buckets: 50,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

pub fn small_run(variant: Variant) -> RunConfig {
    RunConfig {
        variant,
        embed_dim: 8,
        tower: vec![16, 8],
        memory: MemoryConfig {
            sqrt_n: 4,
            d: 8,
            k_top: 3,
            ..MemoryConfig::default()
        },
        seed: 3,
        train: TrainConfig {
            lr: 0.05,
            batch_size: 32,
            epochs: 2,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    }
}
