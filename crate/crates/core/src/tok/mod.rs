//! Byte-level BPE tokenizer training, vocab files, and the
//! character-per-token comparison benchmark.

mod bpe;
mod score;
mod vocab_io;

pub use bpe::{train_bpe, BpeTrainOptions, BpeVocab, Merge};
pub use score::{
    chars_per_token, compare_tokenizers, mean_score, ComparisonRow, ComparisonTable, DomainCorpus,
};
pub use vocab_io::{read_vocab, vocab_from_str, vocab_to_string, write_vocab};
