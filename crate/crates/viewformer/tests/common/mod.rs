#![allow(dead_code)]

use std::path::Path;

use viewformer::config::{DataConfig, RunConfig, Schedule};
use viewformer_core::codebook::CodebookConfig;
use viewformer_core::model::ModelConfig;

/// Small but complete configuration for tests that train.
pub fn small_config(dir: &Path) -> RunConfig {
    RunConfig {
        seed: 7,
        dataset: dir.join("data"),
        out: dir.join("run"),
        data: DataConfig {
            scenes: 50,
            test_scenes: 10,
            views: 6,
            image_size: 32,
            split_seed: 3,
        },
        codebook: CodebookConfig {
            n_lat: 32,
            d_lat: 16,
            channels: vec![8, 16, 32],
            ..CodebookConfig::default()
        },
        model: ModelConfig {
            d_m: 32,
            layers: 2,
            heads: 2,
            n_lat: 32,
            n_min: 1,
            n: 4,
            ..ModelConfig::default()
        },
        codebook_training: Schedule {
            steps: 200,
            batch: 8,
            lr: 1e-3,
            warmup: 10,
            lr_floor: 0.1,
        },
        transformer_training: Schedule {
            steps: 150,
            batch: 8,
            lr: 1e-3,
            warmup: 10,
            lr_floor: 0.1,
        },
        eval: viewformer::config::EvalConfig {
            context_sizes: vec![1, 2, 3],
            episodes: None,
        },
        ..RunConfig::default()
    }
}

pub fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}
