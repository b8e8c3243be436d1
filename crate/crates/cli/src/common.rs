//! Helpers shared by the subcommands: config layering, corpus loading,
//! tokenizer selection.

use std::path::{Path, PathBuf};

use moelab_core::data::{read_corpus_dir, read_corpus_jsonl, Document};
use moelab_core::kvtext::KvReader;
use moelab_core::model::ModelConfig;
use moelab_core::tok::{read_vocab, BpeVocab};
use moelab_core::train::TrainConfig;
use moelab_core::{Error, Result};

/// Environment variables with this prefix override config keys, e.g.
/// `MOELAB_BASE_LR=3e-3` wins over `base_lr` in the file.
pub const ENV_PREFIX: &str = "MOELAB_";

/// Model and training settings live in one kv file (either side may be
/// omitted and falls back to desk defaults). Precedence: file, then
/// `MOELAB_*` environment variables, then `--seed`.
pub fn load_configs(path: Option<&Path>, seed: Option<u64>) -> Result<(ModelConfig, TrainConfig)> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)?,
        None => String::new(),
    };
    let mut r = KvReader::from_text(&text)?;
    r.apply_env_overrides(ENV_PREFIX);
    let model = ModelConfig::from_reader(&mut r)?;
    let mut train = TrainConfig::from_reader(&mut r)?;
    r.finish()?;
    if let Some(s) = seed {
        train.seed = s;
    }
    Ok((model, train))
}

/// A corpus is either a jsonl file of records or a directory of plain-text
/// files.
pub fn read_documents(path: &Path) -> Result<Vec<Document>> {
    if path.is_dir() {
        read_corpus_dir(path)
    } else {
        read_corpus_jsonl(path)
    }
}

/// Falls back to the 256-token byte-identity vocab when no file is given.
pub fn load_vocab(path: Option<&Path>) -> Result<BpeVocab> {
    match path {
        Some(p) => read_vocab(p),
        None => Ok(BpeVocab::byte_identity()),
    }
}

/// Tokenizes documents into one contiguous id stream, rejecting ids the
/// model cannot embed.
pub fn encode_corpus(docs: &[Document], vocab: &BpeVocab, vocab_limit: usize) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for d in docs {
        out.extend(encode_checked(&d.id, &d.text, vocab, vocab_limit)?);
    }
    Ok(out)
}

pub fn encode_checked(
    what: &str,
    text: &str,
    vocab: &BpeVocab,
    vocab_limit: usize,
) -> Result<Vec<u32>> {
    let ids = vocab.encode(text.as_bytes());
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab_limit) {
        return Err(Error::input(format!(
            "{what:?} tokenizes to id {bad} but the model vocab is {vocab_limit}; \
             pass a --vocab matching the model"
        )));
    }
    Ok(ids)
}

/// Parses `name=path` values for flags that take labeled files.
pub fn parse_labeled(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(format!("expected name=path, got {s:?}")),
    }
}

pub fn check_workers(workers: usize) -> Result<()> {
    if workers == 0 {
        return Err(Error::config("--workers must be at least 1".to_string()));
    }
    Ok(())
}
