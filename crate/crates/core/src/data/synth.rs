//! Synthetic token streams with learnable structure, for training smokes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A seeded order-1 Markov stream: each token has four possible
/// successors with probabilities (0.85, 0.07, 0.05, 0.03), so a model
/// that learns the transition table can push cross-entropy from ln(vocab)
/// down toward the conditional entropy (about 0.58 nats).
pub fn synthetic_token_corpus(n_tokens: usize, vocab_size: u32, seed: u64) -> Result<Vec<u32>> {
    if vocab_size < 8 {
        return Err(Error::config(format!(
            "synthetic corpus needs vocab_size >= 8, got {vocab_size}"
        )));
    }
    if n_tokens == 0 {
        return Err(Error::input("n_tokens must be positive".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = rng.random_range(0..vocab_size);
    let mut out = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        out.push(state);
        let r: f64 = rng.random();
        let branch = if r < 0.85 {
            0
        } else if r < 0.92 {
            1
        } else if r < 0.97 {
            2
        } else {
            3
        };
        state = successor(state, branch, vocab_size);
    }
    Ok(out)
}

fn successor(state: u32, branch: u32, vocab_size: u32) -> u32 {
    // 17 is odd, so state*17 walks the whole space for power-of-two vocabs.
    (state.wrapping_mul(17).wrapping_add(branch * 7 + 1)) % vocab_size
}
