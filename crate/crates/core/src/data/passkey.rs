//! Long-context retrieval harness: hide a numeric key in distractor
//! filler, ask for it back, score by substring match.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fsio::atomic_write;
use crate::tok::BpeVocab;

// Every filler fragment is digit-free so the key digits appear exactly
// once in the finished document.
const FILLER_SENTENCES: [&str; 8] = [
    "The grass is green and the meadow stretches on.",
    "The sky stays blue above the quiet hills.",
    "The sun is bright over the sleepy harbor town.",
    "Rain falls gently on the old slate roof.",
    "Wind moves softly through the tall dry reeds.",
    "The river bends twice before it reaches the sea.",
    "Clouds drift past without any hurry at all.",
    "A narrow path winds up the chalky ridge.",
];

const PAD_WORDS: [&str; 6] = ["again", "and on", "even so", "as before", "quietly", "still"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PasskeySample {
    pub document: String,
    pub question: String,
    pub key: String,
}

#[derive(Clone, Debug)]
pub struct PasskeyParams {
    /// Target length of the finished document in tokens, met within 2%.
    pub token_budget: usize,
    pub key: String,
    /// How far into the filler the key sentence lands, 0.0 = front.
    pub placement: f64,
    pub seed: u64,
}

impl PasskeyParams {
    pub fn new(token_budget: usize, key: impl Into<String>, seed: u64) -> Self {
        PasskeyParams {
            token_budget,
            key: key.into(),
            placement: 0.5,
            seed,
        }
    }
}

pub fn key_sentence(key: &str) -> String {
    format!("The pass key is {key}. Remember it.")
}

fn compose(fillers: &[&str], key_sent: &str, placement: f64, pad: &str) -> String {
    let at = ((placement * fillers.len() as f64).floor() as usize).min(fillers.len());
    let mut parts: Vec<&str> = Vec::with_capacity(fillers.len() + 1);
    parts.extend(&fillers[..at]);
    parts.push(key_sent);
    parts.extend(&fillers[at..]);
    let mut doc = parts.join(" ");
    doc.push_str(pad);
    doc
}

/// Builds one retrieval document under the supplied tokenizer. Filler
/// sentences are drawn with the seed, the key sentence is inserted at the
/// placement fraction, and the document is padded until its token count
/// sits within 2% of the budget.
pub fn passkey_generate(params: &PasskeyParams, vocab: &BpeVocab) -> Result<PasskeySample> {
    if params.key.is_empty() || !params.key.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::input(format!(
            "key must be a non-empty digit string, got {:?}",
            params.key
        )));
    }
    if !(0.0..=1.0).contains(&params.placement) {
        return Err(Error::input(format!(
            "placement must be in [0, 1], got {}",
            params.placement
        )));
    }
    if params.token_budget == 0 {
        return Err(Error::input("token budget must be positive".to_string()));
    }
    let budget = params.token_budget as f64;
    let lo = (0.98 * budget).ceil() as usize;
    let hi = (1.02 * budget).floor() as usize;
    let key_sent = key_sentence(&params.key);
    let count = |doc: &str| vocab.encode(doc.as_bytes()).len();

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut fillers: Vec<&str> = Vec::new();

    // Sentence fill against an additive estimate (cross-boundary merges
    // can only shrink the real count), then verify exactly.
    let mut est = count(&key_sent);
    loop {
        let next = FILLER_SENTENCES[rng.random_range(0..FILLER_SENTENCES.len())];
        let next_tokens = count(&format!(" {next}"));
        if est + next_tokens > params.token_budget {
            break;
        }
        fillers.push(next);
        est += next_tokens;
    }
    let mut actual = count(&compose(&fillers, &key_sent, params.placement, ""));
    while actual > hi {
        match fillers.pop() {
            Some(_) => actual = count(&compose(&fillers, &key_sent, params.placement, "")),
            None => {
                return Err(Error::input(format!(
                    "budget {} cannot hold the key sentence within 2%",
                    params.token_budget
                )))
            }
        }
    }

    // Close the remaining gap with short words, then single letters.
    let mut pad = String::new();
    while actual < lo {
        let gap = lo - actual;
        if gap >= 8 {
            pad.push(' ');
            pad.push_str(PAD_WORDS[rng.random_range(0..PAD_WORDS.len())]);
        } else if pad.ends_with(|c: char| c.is_ascii_alphabetic()) {
            pad.push('m');
        } else {
            pad.push_str(" hm");
        }
        let doc = compose(&fillers, &key_sent, params.placement, &pad);
        actual = count(&doc);
        if pad.len() > 4096 {
            return Err(Error::input(format!(
                "cannot reach budget {} within 2% under this tokenizer",
                params.token_budget
            )));
        }
    }
    let document = compose(&fillers, &key_sent, params.placement, &pad);
    if actual > hi {
        return Err(Error::input(format!(
            "budget {} cannot be met within 2% (closest {actual})",
            params.token_budget
        )));
    }

    if document.matches(params.key.as_str()).count() != 1 {
        return Err(Error::contract(
            "key does not occur exactly once in the document".to_string(),
        ));
    }
    Ok(PasskeySample {
        document,
        question: "What is the pass key? The pass key is".to_string(),
        key: params.key.clone(),
    })
}

/// True iff the key digit string occurs anywhere in the output.
pub fn passkey_score(model_output: &str, key: &str) -> bool {
    model_output.contains(key)
}

/// Reads the key sentence straight out of the document. Used to validate
/// the scorer: a reader that can actually see the whole document scores
/// 100%.
pub fn cheating_oracle(document: &str) -> Option<String> {
    let start = document.find("The pass key is ")?;
    let rest = &document[start..];
    let end = rest.find('.')?;
    Some(rest[..=end].to_string())
}

/// Lays out `NNNN.document.txt` / `.question.txt` / `.answer.txt` triples.
pub fn write_passkey_suite(dir: &Path, samples: &[PasskeySample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        atomic_write(&dir.join(format!("{i:04}.document.txt")), s.document.as_bytes())?;
        atomic_write(&dir.join(format!("{i:04}.question.txt")), s.question.as_bytes())?;
        atomic_write(&dir.join(format!("{i:04}.answer.txt")), s.key.as_bytes())?;
    }
    Ok(())
}

pub fn read_passkey_suite(dir: &Path) -> Result<Vec<PasskeySample>> {
    let mut indices: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(i) = name.strip_suffix(".document.txt") {
            indices.push(i.to_string());
        }
    }
    indices.sort();
    if indices.is_empty() {
        return Err(Error::input(format!(
            "no *.document.txt files in {}",
            dir.display()
        )));
    }
    indices
        .into_iter()
        .map(|i| {
            Ok(PasskeySample {
                document: std::fs::read_to_string(dir.join(format!("{i}.document.txt")))?,
                question: std::fs::read_to_string(dir.join(format!("{i}.question.txt")))?,
                key: std::fs::read_to_string(dir.join(format!("{i}.answer.txt")))?
                    .trim()
                    .to_string(),
            })
        })
        .collect()
}

/// Scores `NNNN.output.txt` files against a suite's answers.
/// Returns (correct, total, accuracy).
pub fn score_suite(suite_dir: &Path, outputs_dir: &Path) -> Result<(usize, usize, f64)> {
    let suite = read_passkey_suite(suite_dir)?;
    let mut correct = 0;
    for (i, s) in suite.iter().enumerate() {
        let out_path = outputs_dir.join(format!("{i:04}.output.txt"));
        let output = std::fs::read_to_string(&out_path).map_err(|e| {
            Error::input(format!("{}: {e}", out_path.display()))
        })?;
        if passkey_score(&output, &s.key) {
            correct += 1;
        }
    }
    Ok((correct, suite.len(), correct as f64 / suite.len() as f64))
}
