//! Fixtures shared by the benchmarks.

use lfr_core::model::{Model, ModelConfig};
use lfr_core::tasks::{gen_previous_task, Corpus, Sizes, WorldConfig};

/// Desk-scale model matching the default experiment config.
pub fn desk_model(vocab_size: usize) -> Model {
    let cfg = ModelConfig {
        layers: 1,
        model_dim: 32,
        ffn_dim: 64,
        heads: 2,
        vocab_size,
        max_len: 10,
        dropout: 0.1,
        ..ModelConfig::default()
    };
    Model::new(cfg, 1).expect("valid config")
}

/// Previous-task validation corpora of the default world and its vocabulary size.
pub fn desk_corpora(valid_per_direction: usize) -> (Vec<Corpus>, usize) {
    let world = WorldConfig {
        languages: 3,
        concepts: 16,
        min_len: 3,
        max_len: 6,
        zipf: 1.0,
    };
    let sizes = Sizes { train: 1, valid: valid_per_direction, test: 1 };
    let (world, data) = gen_previous_task(1, world, sizes).expect("valid world");
    (data.valid, world.base_vocab)
}
