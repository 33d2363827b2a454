//! Shared fixtures for unit tests.

use std::sync::OnceLock;

use crate::models::Model;
use crate::pipeline::{generate_data, train_lm, GenDataConfig, LmShape, TrainRunConfig, WorldData};
use crate::worldgen::Lang;

/// A small single-language world and a transformer trained to memorise it,
/// built once per test binary.
pub(crate) fn toy_world_lm() -> &'static (WorldData, Model) {
    static CELL: OnceLock<(WorldData, Model)> = OnceLock::new();
    CELL.get_or_init(|| {
        let gen = GenDataConfig {
            seed: 3,
            num_persons: 8,
            num_countries: 4,
            languages: vec![Lang::L1],
            num_edits: 8,
            max_vocab: None,
        };
        let data = generate_data(&gen).expect("toy world");
        let mut tc = TrainRunConfig::new("unused");
        tc.model = LmShape {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 8,
        };
        tc.steps = 600;
        tc.learning_rate = 0.02;
        let (model, _) = train_lm(&tc, &data).expect("toy training");
        (data, model)
    })
}
