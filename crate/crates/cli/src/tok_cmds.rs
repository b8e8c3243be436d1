//! `tok train|score|compare`: byte-level BPE vocab building and
//! characters-per-token evaluation.

use std::path::PathBuf;

use clap::{Args, Subcommand};

use moelab_core::tok::{
    chars_per_token, compare_tokenizers, mean_score, read_vocab, train_bpe, write_vocab,
    BpeTrainOptions, DomainCorpus,
};
use moelab_core::Result;

use crate::common;

#[derive(Subcommand)]
pub enum TokCmd {
    /// Train a byte-level BPE vocab on a corpus
    Train(TrainArgs),
    /// Characters-per-token scores for one vocab
    Score(ScoreArgs),
    /// Ranked table comparing several vocabs across domains
    Compare(CompareArgs),
}

pub fn run(cmd: TokCmd) -> Result<()> {
    match cmd {
        TokCmd::Train(a) => train(a),
        TokCmd::Score(a) => score(a),
        TokCmd::Compare(a) => compare(a),
    }
}

#[derive(Args)]
pub struct TrainArgs {
    /// Training corpus: jsonl records or a directory of text files
    #[arg(long)]
    corpus: PathBuf,
    /// Target vocab size including the 256 byte tokens
    #[arg(long)]
    vocab_size: usize,
    /// Keep merges from crossing whitespace boundaries
    #[arg(long)]
    whitespace_boundaries: bool,
    /// Byte string guaranteed to stay a single token; repeatable
    #[arg(long = "protected")]
    protected: Vec<String>,
    /// Output vocab file
    #[arg(long)]
    out: PathBuf,
}

fn train(a: TrainArgs) -> Result<()> {
    let docs = common::read_documents(&a.corpus)?;
    let bytes: Vec<&[u8]> = docs.iter().map(|d| d.text.as_bytes()).collect();
    let opts = BpeTrainOptions {
        whitespace_boundaries: a.whitespace_boundaries,
        protected_tokens: a.protected.iter().map(|s| s.clone().into_bytes()).collect(),
    };
    let vocab = train_bpe(&bytes, a.vocab_size, &opts)?;
    write_vocab(&a.out, &vocab)?;
    println!("vocab_size {}", vocab.vocab_size());
    println!("merges {}", vocab.merges().len());
    println!("vocab {}", a.out.display());
    Ok(())
}

#[derive(Args)]
pub struct ScoreArgs {
    /// Vocab file to score
    #[arg(long)]
    vocab: PathBuf,
    /// Domain corpus as name=path; repeatable
    #[arg(long = "corpus", value_parser = common::parse_labeled, required = true)]
    corpora: Vec<(String, PathBuf)>,
}

fn score(a: ScoreArgs) -> Result<()> {
    let vocab = read_vocab(&a.vocab)?;
    let mut ratios = Vec::new();
    for (name, path) in &a.corpora {
        let docs = common::read_documents(path)?;
        let corpus = DomainCorpus::new(name.clone(), docs.into_iter().map(|d| d.text.into_bytes()).collect());
        let ratio = chars_per_token(&vocab, &corpus)?;
        println!("{name} {ratio:.6}");
        ratios.push(ratio);
    }
    println!("mean {:.6}", mean_score(&ratios));
    Ok(())
}

#[derive(Args)]
pub struct CompareArgs {
    /// Vocab as name=path; repeatable
    #[arg(long = "vocab", value_parser = common::parse_labeled, required = true)]
    vocabs: Vec<(String, PathBuf)>,
    /// Domain corpus as name=path; repeatable
    #[arg(long = "corpus", value_parser = common::parse_labeled, required = true)]
    corpora: Vec<(String, PathBuf)>,
    /// Emit CSV instead of the aligned text table
    #[arg(long)]
    csv: bool,
}

fn compare(a: CompareArgs) -> Result<()> {
    let mut loaded = Vec::new();
    for (name, path) in &a.vocabs {
        loaded.push((name.clone(), read_vocab(path)?));
    }
    let refs: Vec<(String, &_)> = loaded.iter().map(|(n, v)| (n.clone(), v)).collect();

    let mut corpora = Vec::new();
    for (name, path) in &a.corpora {
        let docs = common::read_documents(path)?;
        corpora.push(DomainCorpus::new(
            name.clone(),
            docs.into_iter().map(|d| d.text.into_bytes()).collect(),
        ));
    }

    let table = compare_tokenizers(&refs, &corpora)?;
    if a.csv {
        print!("{}", table.render_csv());
    } else {
        print!("{}", table.render_text());
    }
    Ok(())
}
