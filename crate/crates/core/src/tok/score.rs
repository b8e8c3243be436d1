//! Character-per-token scoring and the tokenizer comparison table.

use crate::error::{Error, Result};
use crate::tok::bpe::BpeVocab;

/// A named pile of documents from one domain (a language, a code corpus).
#[derive(Clone, Debug)]
pub struct DomainCorpus {
    pub name: String,
    pub documents: Vec<Vec<u8>>,
}

impl DomainCorpus {
    pub fn new(name: impl Into<String>, documents: Vec<Vec<u8>>) -> Self {
        DomainCorpus {
            name: name.into(),
            documents,
        }
    }

    /// Unicode scalar values, not bytes. Ill-formed UTF-8 counts each
    /// replacement-decoded sequence as one character.
    pub fn char_count(&self) -> usize {
        self.documents
            .iter()
            .map(|d| String::from_utf8_lossy(d).chars().count())
            .sum()
    }
}

/// Mean characters per token over the whole corpus: total characters
/// divided by total tokens. Higher is better (fewer tokens per character).
pub fn chars_per_token(vocab: &BpeVocab, corpus: &DomainCorpus) -> Result<f64> {
    let tokens: usize = corpus.documents.iter().map(|d| vocab.encode(d).len()).sum();
    if tokens == 0 {
        return Err(Error::input(format!("corpus {:?} is empty", corpus.name)));
    }
    Ok(corpus.char_count() as f64 / tokens as f64)
}

pub fn mean_score(ratios: &[f64]) -> f64 {
    ratios.iter().sum::<f64>() / ratios.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    pub ratios: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub domains: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

/// Scores every tokenizer on every domain. Rows come back sorted by mean
/// score, best first; equal means fall back to name order.
pub fn compare_tokenizers(
    vocabs: &[(String, &BpeVocab)],
    corpora: &[DomainCorpus],
) -> Result<ComparisonTable> {
    if vocabs.is_empty() || corpora.is_empty() {
        return Err(Error::input(
            "comparison needs at least one tokenizer and one corpus".to_string(),
        ));
    }
    let mut rows = Vec::with_capacity(vocabs.len());
    for (name, vocab) in vocabs {
        let ratios: Vec<f64> = corpora
            .iter()
            .map(|c| chars_per_token(vocab, c))
            .collect::<Result<_>>()?;
        let mean = mean_score(&ratios);
        rows.push(ComparisonRow {
            name: name.clone(),
            ratios,
            mean,
        });
    }
    rows.sort_by(|a, b| {
        b.mean
            .partial_cmp(&a.mean)
            .expect("ratios are finite")
            .then_with(|| a.name.cmp(&b.name))
    });
    Ok(ComparisonTable {
        domains: corpora.iter().map(|c| c.name.clone()).collect(),
        rows,
    })
}

impl ComparisonTable {
    pub fn render_text(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .chain(["tokenizer".len()])
            .max()
            .unwrap();
        let col_w = |s: &str| s.len().max(6);
        let mut out = format!("{:<name_w$}", "tokenizer");
        for d in &self.domains {
            out.push_str(&format!("  {:>w$}", d, w = col_w(d)));
        }
        out.push_str(&format!("  {:>10}\n", "mean score"));
        for r in &self.rows {
            out.push_str(&format!("{:<name_w$}", r.name));
            for (d, v) in self.domains.iter().zip(&r.ratios) {
                out.push_str(&format!("  {:>w$.2}", v, w = col_w(d)));
            }
            out.push_str(&format!("  {:>10.2}\n", r.mean));
        }
        out
    }

    pub fn render_csv(&self) -> String {
        let mut out = String::from("tokenizer");
        for d in &self.domains {
            out.push(',');
            out.push_str(d);
        }
        out.push_str(",mean_score\n");
        for r in &self.rows {
            out.push_str(&r.name);
            for v in &r.ratios {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push_str(&format!(",{:.6}\n", r.mean));
        }
        out
    }
}
