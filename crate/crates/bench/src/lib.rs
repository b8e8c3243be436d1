//! Shared fixtures for the criterion benches in `benches/hot_paths.rs`.
//! Run with `cargo bench -p moelab-bench`.

use moelab_core::data::synthetic_token_corpus;
use moelab_core::model::{ModelConfig, MoeLm};

pub fn bench_model() -> MoeLm {
    MoeLm::new(ModelConfig::desk_small(), 7).expect("desk_small is a valid config")
}

pub fn token_window(len: usize) -> Vec<u32> {
    let vocab = ModelConfig::desk_small().vocab_size as u32;
    synthetic_token_corpus(len, vocab, 13).expect("corpus parameters are valid")
}
