//! `pretrain` and `dpo`: the two weight-updating commands. Both print a
//! short key-value summary on stdout and leave checkpoints plus a
//! telemetry log in the output directory.

use std::path::{Path, PathBuf};

use clap::Args;

use moelab_core::data::synthetic_token_corpus;
use moelab_core::model::MoeLm;
use moelab_core::tok::BpeVocab;
use moelab_core::train::{dpo_loop, train_loop, TrainOutcome};
use moelab_core::{Error, Result};

use crate::common;

#[derive(Args)]
pub struct PretrainArgs {
    /// kv config file holding model and training keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for checkpoints and telemetry
    #[arg(long)]
    out: PathBuf,
    /// Upper bound on worker threads
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Corpus to train on: jsonl records or a directory of text files
    #[arg(long, conflicts_with = "synthetic_tokens")]
    corpus: Option<PathBuf>,
    /// Tokenizer vocab used with --corpus; byte identity when omitted
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Train on a seeded synthetic corpus of this many tokens instead
    #[arg(long)]
    synthetic_tokens: Option<usize>,
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    common::check_workers(a.workers)?;
    let (mcfg, tcfg) = common::load_configs(a.config.as_deref(), a.seed)?;
    let corpus = match (&a.corpus, a.synthetic_tokens) {
        (Some(path), None) => {
            let vocab = common::load_vocab(a.vocab.as_deref())?;
            let docs = common::read_documents(path)?;
            common::encode_corpus(&docs, &vocab, mcfg.vocab_size)?
        }
        (None, Some(n)) => synthetic_token_corpus(n, mcfg.vocab_size as u32, tcfg.seed)?,
        _ => {
            return Err(Error::config(
                "pretrain needs exactly one of --corpus or --synthetic-tokens".to_string(),
            ))
        }
    };
    let mut model = MoeLm::new(mcfg, tcfg.seed)?;
    let outcome = train_loop(&mut model, &corpus, &tcfg, &a.out)?;
    print_outcome(&outcome);
    Ok(())
}

#[derive(Args)]
pub struct DpoArgs {
    /// kv config file; dpo_* keys control the loss
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Starting checkpoint to tune
    #[arg(long)]
    checkpoint: PathBuf,
    /// jsonl preference pairs: {"prompt": ..., "chosen": ..., "rejected": ...},
    /// each value a token id array or (with --vocab) a string
    #[arg(long)]
    pairs: PathBuf,
    /// Tokenizer vocab for string-valued pairs
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

pub fn dpo(a: DpoArgs) -> Result<()> {
    common::check_workers(a.workers)?;
    let (_, tcfg) = common::load_configs(a.config.as_deref(), a.seed)?;
    let mut model = MoeLm::load(&a.checkpoint)?;
    let vocab = a.vocab.as_deref().map(moelab_core::tok::read_vocab).transpose()?;
    let pairs = read_preference_pairs(&a.pairs, vocab.as_ref(), model.config.vocab_size)?;
    let outcome = dpo_loop(&mut model, &pairs, &tcfg, &a.out)?;
    print_outcome(&outcome);
    Ok(())
}

fn print_outcome(o: &TrainOutcome) {
    println!("steps {}", o.steps);
    println!("first_loss {:.6}", o.first_loss);
    println!("final_loss {:.6}", o.final_loss);
    println!("checkpoint {}", o.final_checkpoint.display());
    println!("telemetry {}", o.telemetry_path.display());
}

type Pair = (Vec<u32>, Vec<u32>, Vec<u32>);

fn read_preference_pairs(
    path: &Path,
    vocab: Option<&BpeVocab>,
    vocab_limit: usize,
) -> Result<Vec<Pair>> {
    let text = std::fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| {
            Error::input(format!("{}:{}: not valid json: {e}", path.display(), lineno + 1))
        })?;
        let field = |name: &str| -> Result<Vec<u32>> {
            token_field(&v, name, vocab, vocab_limit)
                .map_err(|e| Error::input(format!("{}:{}: {e}", path.display(), lineno + 1)))
        };
        pairs.push((field("prompt")?, field("chosen")?, field("rejected")?));
    }
    if pairs.is_empty() {
        return Err(Error::input(format!("{}: no preference pairs", path.display())));
    }
    Ok(pairs)
}

fn token_field(
    v: &serde_json::Value,
    name: &str,
    vocab: Option<&BpeVocab>,
    vocab_limit: usize,
) -> Result<Vec<u32>> {
    match v.get(name) {
        Some(serde_json::Value::Array(items)) => items
            .iter()
            .map(|x| match x.as_u64() {
                Some(id) if (id as usize) < vocab_limit => Ok(id as u32),
                _ => Err(Error::input(format!(
                    "field {name:?}: token {x} is not an id below {vocab_limit}"
                ))),
            })
            .collect(),
        Some(serde_json::Value::String(s)) => match vocab {
            Some(vb) => common::encode_checked(name, s, vb, vocab_limit),
            None => Err(Error::input(format!(
                "field {name:?} is a string; pass --vocab to tokenize it"
            ))),
        },
        _ => Err(Error::input(format!("missing field {name:?}"))),
    }
}
