//! Corpus handling: document records, exact and MinHash deduplication,
//! the passkey retrieval harness, and synthetic corpora.

mod dedup;
mod document;
mod passkey;
mod synth;

pub use dedup::{
    exact_dedup, jaccard_estimate, minhash_dedup, minhash_dedup_all_pairs, minhash_dedup_workers,
    minhash_signature,
    ClusterReport, DedupOutcome, MinHashParams, MinHashSignature,
};
pub use document::{read_corpus_dir, read_corpus_jsonl, write_corpus_jsonl, Document};
pub use passkey::{
    cheating_oracle, key_sentence, passkey_generate, passkey_score, read_passkey_suite,
    score_suite, write_passkey_suite, PasskeyParams, PasskeySample,
};
pub use synth::synthetic_token_corpus;
