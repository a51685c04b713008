//! Shared fixtures for the criterion benchmarks.

use timesync_core::attention::{geometric_slopes, DeltaTransform, TimeAliBiConfig};
use timesync_core::journey::{generate_journeys, GeneratorConfig};
use timesync_core::model::ModelConfig;
use timesync_core::numerics::Tensor;
use timesync_core::pipeline::{preprocess, PipelineConfig, Preprocessed};

/// Deterministic `[rows, cols]` tensor with entries in (−1, 1).
pub fn tensor(rows: usize, cols: usize, salt: u64) -> Tensor {
    let data = (0..rows * cols)
        .map(|i| {
            let x = (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt;
            (x >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// Default synthetic data for `n_users` users.
pub fn dataset(n_users: usize) -> Preprocessed {
    let g = GeneratorConfig {
        n_users,
        ..GeneratorConfig::default()
    };
    let j = generate_journeys(&g, 0).expect("default generator config is valid");
    preprocess(&j.events, &j.intents, g.start_timestamp, &PipelineConfig::default()).expect("default data splits")
}

/// The model shape of `configs/default.toml`.
pub fn experiment_model() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_heads: 4,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        ffn_dim: 64,
        alibi: TimeAliBiConfig {
            slopes: geometric_slopes(4),
            delta_transform: DeltaTransform::Linear,
            time_unit_seconds: 3600.0,
            ..TimeAliBiConfig::new(4)
        },
        ..ModelConfig::default()
    }
}
