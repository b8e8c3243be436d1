//! `dedup` and `passkey`: corpus hygiene and the retrieval suite.

use std::path::PathBuf;

use clap::{Args, Subcommand, ValueEnum};

use moelab_core::data::{
    exact_dedup, minhash_dedup_all_pairs, minhash_dedup_workers, passkey_generate, score_suite,
    write_corpus_jsonl, write_passkey_suite, MinHashParams, PasskeyParams,
};
use moelab_core::fsio::atomic_write;
use moelab_core::Result;

use crate::common;

#[derive(Clone, Copy, ValueEnum)]
pub enum DedupMode {
    /// Hash of whitespace-trimmed text, keep first occurrence
    Exact,
    /// MinHash signatures with LSH banding
    Minhash,
    /// MinHash comparing every pair; quadratic reference mode
    MinhashAllPairs,
}

#[derive(Args)]
pub struct DedupArgs {
    /// Corpus: jsonl records or a directory of text files
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = DedupMode::Minhash)]
    mode: DedupMode,
    /// Estimated-Jaccard threshold for clustering
    #[arg(long, default_value_t = 0.8)]
    threshold: f64,
    #[arg(long, default_value_t = 128)]
    num_hashes: usize,
    #[arg(long, default_value_t = 5)]
    shingle_size: usize,
    /// LSH band count; must divide --num-hashes
    #[arg(long, default_value_t = 16)]
    bands: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Directory for survivors.jsonl and report.txt
    #[arg(long)]
    out: PathBuf,
}

pub fn dedup(a: DedupArgs) -> Result<()> {
    common::check_workers(a.workers)?;
    let docs = common::read_documents(&a.corpus)?;
    let n_before = docs.len();

    let (survivors, report) = match a.mode {
        DedupMode::Exact => {
            let survivors = exact_dedup(docs);
            let report = format!("exact dedup: kept {} of {n_before}\n", survivors.len());
            (survivors, report)
        }
        DedupMode::Minhash | DedupMode::MinhashAllPairs => {
            let params = MinHashParams {
                num_hashes: a.num_hashes,
                shingle_size: a.shingle_size,
                bands: a.bands,
                threshold: a.threshold,
                seed: a.seed,
            };
            let outcome = match a.mode {
                DedupMode::Minhash => minhash_dedup_workers(docs, &params, a.workers)?,
                _ => minhash_dedup_all_pairs(docs, &params)?,
            };
            let report = outcome.render_report();
            (outcome.survivors, report)
        }
    };

    std::fs::create_dir_all(&a.out)?;
    write_corpus_jsonl(&a.out.join("survivors.jsonl"), &survivors)?;
    atomic_write(&a.out.join("report.txt"), report.as_bytes())?;
    println!("kept {} of {n_before}", survivors.len());
    println!("survivors {}", a.out.join("survivors.jsonl").display());
    println!("report {}", a.out.join("report.txt").display());
    Ok(())
}

#[derive(Subcommand)]
pub enum PasskeyCmd {
    /// Write a suite of numbered document/question/answer triples
    Generate(GenerateArgs),
    /// Score a directory of numbered model outputs against a suite
    Score(ScoreArgs),
}

pub fn passkey(cmd: PasskeyCmd) -> Result<()> {
    match cmd {
        PasskeyCmd::Generate(a) => generate(a),
        PasskeyCmd::Score(a) => score(a),
    }
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Token budget per document, met within 2%
    #[arg(long)]
    budget: usize,
    /// Documents in the suite
    #[arg(long, default_value_t = 50)]
    count: usize,
    /// Key placement fraction in [0,1]; seeded per document when omitted
    #[arg(long)]
    placement: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tokenizer vocab for budget accounting; byte identity when omitted
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Suite directory
    #[arg(long)]
    out: PathBuf,
}

fn generate(a: GenerateArgs) -> Result<()> {
    let vocab = common::load_vocab(a.vocab.as_deref())?;
    let mut samples = Vec::with_capacity(a.count);
    for i in 0..a.count as u64 {
        // Splitmix-style scramble: distinct key and placement per document,
        // fully determined by (seed, i).
        let h = (a.seed ^ i.wrapping_mul(0x9e3779b97f4a7c15)).wrapping_mul(0xbf58476d1ce4e5b9);
        let key = format!("{:05}", 10_000 + h % 90_000);
        let mut params = PasskeyParams::new(a.budget, key, a.seed.wrapping_add(i));
        params.placement = match a.placement {
            Some(p) => p,
            None => ((h >> 32) % 1_000) as f64 / 999.0,
        };
        samples.push(passkey_generate(&params, &vocab)?);
    }
    write_passkey_suite(&a.out, &samples)?;
    println!("documents {}", samples.len());
    println!("suite {}", a.out.display());
    Ok(())
}

#[derive(Args)]
pub struct ScoreArgs {
    /// Suite directory from `passkey generate`
    #[arg(long)]
    suite: PathBuf,
    /// Directory of NNNN.output.txt model answers
    #[arg(long)]
    outputs: PathBuf,
}

fn score(a: ScoreArgs) -> Result<()> {
    let (correct, total, accuracy) = score_suite(&a.suite, &a.outputs)?;
    println!("accuracy {accuracy:.3}");
    println!("correct {correct} of {total}");
    Ok(())
}
