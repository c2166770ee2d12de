//! Fixtures shared by the benchmarks.

use fda_core::corpus::generate;
use fda_core::{CorpusItem, Model, ModelConfig, PlacementSpec, TokenSequence};

/// Untrained default-size model with the given placement.
pub fn model(placement: &str) -> Model {
    let placement: PlacementSpec = placement.parse().expect("valid placement");
    Model::new(ModelConfig {
        placement,
        seed: 1,
        ..ModelConfig::default()
    })
    .expect("default model config is valid")
}

/// Two corpus items with their tokenized captions, so one can serve as the
/// other's target.
pub fn pair(max_len: usize) -> Vec<(CorpusItem, TokenSequence)> {
    generate(9, 2, 0.0)
        .expect("corpus")
        .into_iter()
        .map(|it| {
            let seq = it.sequence(max_len).expect("caption fits");
            (it, seq)
        })
        .collect()
}
