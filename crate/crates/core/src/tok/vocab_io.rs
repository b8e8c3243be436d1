//! Vocab files: a short header, then one merge per line as hex byte pairs.
//! Loading replays the merges, so a file that references tokens before they
//! exist is rejected.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio::atomic_write;
use crate::tok::bpe::BpeVocab;

pub fn vocab_to_string(vocab: &BpeVocab) -> String {
    let mut s = String::from("bbpe v1\n");
    s.push_str(&format!("vocab_size {}\n", vocab.vocab_size()));
    s.push_str(&format!(
        "whitespace_boundaries {}\n",
        vocab.whitespace_boundaries() as u8
    ));
    s.push_str(&format!("merges {}\n", vocab.merges().len()));
    for m in vocab.merges() {
        let l = vocab.token_bytes(m.left).expect("operand in vocab");
        let r = vocab.token_bytes(m.right).expect("operand in vocab");
        s.push_str(&format!("{} {}\n", hex::encode(l), hex::encode(r)));
    }
    s
}

pub fn vocab_from_str(text: &str) -> Result<BpeVocab> {
    let mut lines = text.lines();
    let bad = |msg: &str| Error::input(format!("vocab file: {msg}"));
    if lines.next() != Some("bbpe v1") {
        return Err(bad("missing 'bbpe v1' header"));
    }
    let field = |line: Option<&str>, key: &str| -> Result<String> {
        let line = line.ok_or_else(|| bad("truncated header"))?;
        line.strip_prefix(key)
            .and_then(|v| v.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| bad(&format!("expected '{key} <value>', got {line:?}")))
    };
    let vocab_size: usize = field(lines.next(), "vocab_size")?
        .parse()
        .map_err(|_| bad("vocab_size is not a number"))?;
    let ws = match field(lines.next(), "whitespace_boundaries")?.as_str() {
        "0" => false,
        "1" => true,
        other => return Err(bad(&format!("whitespace_boundaries must be 0 or 1, got {other}"))),
    };
    let n_merges: usize = field(lines.next(), "merges")?
        .parse()
        .map_err(|_| bad("merges is not a number"))?;

    let mut pairs = Vec::with_capacity(n_merges);
    for i in 0..n_merges {
        let line = lines.next().ok_or_else(|| bad("fewer merge lines than declared"))?;
        let (l, r) = line
            .split_once(' ')
            .ok_or_else(|| bad(&format!("merge line {i} is not two hex fields")))?;
        let decode = |h: &str| {
            hex::decode(h).map_err(|_| bad(&format!("merge line {i} has invalid hex")))
        };
        pairs.push((decode(l)?, decode(r)?));
    }
    if lines.next().is_some() {
        return Err(bad("trailing content after declared merges"));
    }

    let vocab = BpeVocab::from_merge_bytes(&pairs, ws)?;
    if vocab.vocab_size() != vocab_size {
        return Err(bad(&format!(
            "header says vocab_size {vocab_size}, replay produced {}",
            vocab.vocab_size()
        )));
    }
    Ok(vocab)
}

pub fn write_vocab(path: &Path, vocab: &BpeVocab) -> Result<()> {
    atomic_write(path, vocab_to_string(vocab).as_bytes())
}

pub fn read_vocab(path: &Path) -> Result<BpeVocab> {
    vocab_from_str(&std::fs::read_to_string(path)?)
}
