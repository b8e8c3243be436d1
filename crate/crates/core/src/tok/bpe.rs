//! Byte-level BPE. The base alphabet is all 256 bytes, so any input is
//! encodable and decode is total on known ids.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// One learned merge. `out` is usually a fresh id, but when the
/// concatenated bytes already name an existing token (reachable through a
/// different split) the merge reuses that id, keeping the vocab keyed by
/// content.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Merge {
    pub left: u32,
    pub right: u32,
    pub out: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeVocab {
    tokens: Vec<Vec<u8>>,
    merges: Vec<Merge>,
    whitespace_boundaries: bool,
}

#[derive(Clone, Debug, Default)]
pub struct BpeTrainOptions {
    /// When set, merges never cross a boundary between whitespace and
    /// non-whitespace bytes. Off by default: pure byte-level.
    pub whitespace_boundaries: bool,
    /// Byte strings guaranteed to become single tokens, installed as merge
    /// chains ahead of the learned merges. Counted on top of the target
    /// vocab size.
    pub protected_tokens: Vec<Vec<u8>>,
}

/// Incremental vocab bookkeeping shared by the trainer and file replay.
struct VocabState {
    tokens: Vec<Vec<u8>>,
    by_bytes: HashMap<Vec<u8>, u32>,
    merges: Vec<Merge>,
}

impl VocabState {
    fn new() -> Self {
        let tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let by_bytes = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        VocabState {
            tokens,
            by_bytes,
            merges: Vec::new(),
        }
    }

    fn id_of(&self, bytes: &[u8]) -> Option<u32> {
        self.by_bytes.get(bytes).copied()
    }

    fn merge(&mut self, left: u32, right: u32) -> u32 {
        let mut bytes = self.tokens[left as usize].clone();
        bytes.extend_from_slice(&self.tokens[right as usize]);
        let out = match self.by_bytes.get(&bytes) {
            Some(&id) => id,
            None => {
                let id = self.tokens.len() as u32;
                self.tokens.push(bytes.clone());
                self.by_bytes.insert(bytes, id);
                id
            }
        };
        self.merges.push(Merge { left, right, out });
        out
    }

    fn into_vocab(self, whitespace_boundaries: bool) -> BpeVocab {
        BpeVocab {
            tokens: self.tokens,
            merges: self.merges,
            whitespace_boundaries,
        }
    }
}

fn segments_of(text: &[u8], whitespace_boundaries: bool) -> Vec<Vec<u32>> {
    if text.is_empty() {
        return Vec::new();
    }
    if !whitespace_boundaries {
        return vec![text.iter().map(|&b| b as u32).collect()];
    }
    let mut out = Vec::new();
    let mut cur: Vec<u32> = vec![text[0] as u32];
    let mut cur_ws = text[0].is_ascii_whitespace();
    for &b in &text[1..] {
        let ws = b.is_ascii_whitespace();
        if ws != cur_ws {
            out.push(std::mem::take(&mut cur));
            cur_ws = ws;
        }
        cur.push(b as u32);
    }
    out.push(cur);
    out
}

/// Replaces non-overlapping (left, right) adjacencies left to right.
fn apply_merge(seq: &mut Vec<u32>, m: Merge) {
    let mut w = 0;
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == m.left && seq[i + 1] == m.right {
            seq[w] = m.out;
            i += 2;
        } else {
            seq[w] = seq[i];
            i += 1;
        }
        w += 1;
    }
    seq.truncate(w);
}

/// Greedy pair-frequency training. Each round merges the most frequent
/// adjacent pair (pairs counted with overlap, so "aaa" holds two ("a","a")
/// pairs); frequency ties go to the lexicographically smallest
/// (left bytes, right bytes). Training stops at the target vocab size or
/// when no pair repeats. No randomness anywhere: retraining on the same
/// corpus reproduces the merge list.
pub fn train_bpe(
    docs: &[&[u8]],
    target_vocab_size: usize,
    opts: &BpeTrainOptions,
) -> Result<BpeVocab> {
    if docs.iter().all(|d| d.is_empty()) {
        return Err(Error::input("empty corpus".to_string()));
    }
    if target_vocab_size < 256 {
        return Err(Error::config(format!(
            "target_vocab_size {target_vocab_size} is below the 256-byte base alphabet"
        )));
    }

    let mut state = VocabState::new();
    let mut segments: Vec<Vec<u32>> = docs
        .iter()
        .flat_map(|d| segments_of(d, opts.whitespace_boundaries))
        .collect();

    for tok in &opts.protected_tokens {
        if tok.is_empty() {
            return Err(Error::input("protected token must be non-empty".to_string()));
        }
        let mut cur = tok[0] as u32;
        for &b in &tok[1..] {
            let mut bytes = state.tokens[cur as usize].clone();
            bytes.push(b);
            cur = match state.id_of(&bytes) {
                Some(id) => id,
                None => {
                    let m = Merge {
                        left: cur,
                        right: b as u32,
                        out: state.merge(cur, b as u32),
                    };
                    for seg in &mut segments {
                        apply_merge(seg, m);
                    }
                    m.out
                }
            };
        }
    }

    while state.tokens.len() < target_vocab_size {
        let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
        for seg in &segments {
            for w in seg.windows(2) {
                *counts.entry((w[0], w[1])).or_insert(0) += 1;
            }
        }
        // Ids map one-to-one onto byte strings, so the (count, bytes) order
        // below has a unique maximum and the hash iteration order is moot.
        let mut best: Option<((u32, u32), u64)> = None;
        for (&pair, &count) in &counts {
            let better = match best {
                None => true,
                Some((bp, bc)) => {
                    let key = (
                        &state.tokens[pair.0 as usize],
                        &state.tokens[pair.1 as usize],
                    );
                    let best_key =
                        (&state.tokens[bp.0 as usize], &state.tokens[bp.1 as usize]);
                    count > bc || (count == bc && key < best_key)
                }
            };
            if better {
                best = Some((pair, count));
            }
        }
        let Some(((left, right), count)) = best else {
            break;
        };
        if count < 2 {
            break;
        }
        let m = Merge {
            left,
            right,
            out: state.merge(left, right),
        };
        for seg in &mut segments {
            apply_merge(seg, m);
        }
    }

    Ok(state.into_vocab(opts.whitespace_boundaries))
}

impl BpeVocab {
    /// The untrained tokenizer: 256 byte tokens, no merges.
    pub fn byte_identity() -> Self {
        VocabState::new().into_vocab(false)
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(|t| t.as_slice())
    }

    pub fn whitespace_boundaries(&self) -> bool {
        self.whitespace_boundaries
    }

    /// Rebuilds a vocab from merge operand bytes, in order. Used by file
    /// loading; fails if a merge names bytes that no prior token covers.
    pub fn from_merge_bytes(
        pairs: &[(Vec<u8>, Vec<u8>)],
        whitespace_boundaries: bool,
    ) -> Result<Self> {
        let mut state = VocabState::new();
        for (i, (l, r)) in pairs.iter().enumerate() {
            let left = state
                .id_of(l)
                .ok_or_else(|| Error::input(format!("merge {i} references unknown token")))?;
            let right = state
                .id_of(r)
                .ok_or_else(|| Error::input(format!("merge {i} references unknown token")))?;
            state.merge(left, right);
        }
        Ok(state.into_vocab(whitespace_boundaries))
    }

    /// The same tokenizer with only the first `n` merges kept.
    pub fn truncated(&self, n: usize) -> Self {
        let pairs: Vec<(Vec<u8>, Vec<u8>)> = self.merges[..n.min(self.merges.len())]
            .iter()
            .map(|m| {
                (
                    self.tokens[m.left as usize].clone(),
                    self.tokens[m.right as usize].clone(),
                )
            })
            .collect();
        Self::from_merge_bytes(&pairs, self.whitespace_boundaries)
            .expect("own merges are well-founded")
    }

    /// Applies the merges in training order.
    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        let mut out = Vec::new();
        for mut seg in segments_of(text, self.whitespace_boundaries) {
            for &m in &self.merges {
                if seg.len() < 2 {
                    break;
                }
                apply_merge(&mut seg, m);
            }
            out.extend(seg);
        }
        out
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            match self.tokens.get(id as usize) {
                Some(bytes) => out.extend_from_slice(bytes),
                None => {
                    return Err(Error::input(format!(
                        "unknown token id {id} (vocab size {})",
                        self.tokens.len()
                    )))
                }
            }
        }
        Ok(out)
    }
}
