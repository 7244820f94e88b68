//! Shared fixtures for the benchmarks.

use mmtp::data::{generate_mixed, PresetKind, SceneBatch};
use mmtp::{ModelConfig, Predictor};

/// A seeded predictor and a batch of `batch` generated scenes.
pub fn fixture(config: &ModelConfig, batch: usize) -> (Predictor, SceneBatch) {
    let layout = config.layout();
    let scenes = generate_mixed(&PresetKind::ALL, batch, 1, &layout).expect("generated scenes");
    let refs: Vec<_> = scenes.iter().collect();
    let stacked = SceneBatch::stack(&refs, &layout).expect("batch");
    (Predictor::new(config, 0).expect("valid config"), stacked)
}
