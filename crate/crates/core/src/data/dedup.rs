//! Exact and MinHash near-duplicate removal.
//!
//! Exact dedup hashes trailing-whitespace-trimmed text and keeps the first
//! occurrence. MinHash builds per-document signatures over character
//! shingles; candidate pairs come from LSH banding (or all pairs in the
//! slow exact mode) and are merged when the estimated Jaccard clears the
//! threshold.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::document::Document;
use crate::error::{Error, Result};

pub fn exact_dedup(docs: Vec<Document>) -> Vec<Document> {
    let mut seen: HashSet<[u8; 32]> = HashSet::new();
    docs.into_iter()
        .filter(|d| seen.insert(Sha256::digest(d.text.trim_end().as_bytes()).into()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MinHashSignature {
    values: Vec<u64>,
    shingle_size: usize,
    seed: u64,
    /// Set when the document was shorter than one shingle and was hashed
    /// as a single whole-text shingle.
    pub whole_text: bool,
}

impl MinHashSignature {
    pub fn values(&self) -> &[u64] {
        &self.values
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// The affine permutation parameters for hash `0..num_hashes`, derived
/// from the seed. Generated as a stream so a prefix of hashes is stable
/// under a larger `num_hashes`.
fn permutations(num_hashes: usize, seed: u64) -> Vec<(u64, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_hashes)
        .map(|_| (rng.random::<u64>() | 1, rng.random::<u64>()))
        .collect()
}

/// Distinct character shingles (not byte shingles, so multi-byte scripts
/// shingle sensibly), base-hashed with FNV-1a.
fn shingle_hashes(text: &str, shingle_size: usize) -> (Vec<u64>, bool) {
    let offsets: Vec<usize> = text
        .char_indices()
        .map(|(i, _)| i)
        .chain([text.len()])
        .collect();
    let n_chars = offsets.len() - 1;
    if n_chars < shingle_size {
        return (vec![fnv1a(text.as_bytes())], true);
    }
    let mut set: HashSet<&str> = HashSet::new();
    for i in 0..=n_chars - shingle_size {
        set.insert(&text[offsets[i]..offsets[i + shingle_size]]);
    }
    (set.into_iter().map(|s| fnv1a(s.as_bytes())).collect(), false)
}

pub fn minhash_signature(
    text: &str,
    num_hashes: usize,
    shingle_size: usize,
    seed: u64,
) -> Result<MinHashSignature> {
    if num_hashes == 0 || shingle_size == 0 {
        return Err(Error::config(
            "num_hashes and shingle_size must be positive".to_string(),
        ));
    }
    let (bases, whole_text) = shingle_hashes(text, shingle_size);
    let values = permutations(num_hashes, seed)
        .iter()
        .map(|&(a, b)| {
            bases
                .iter()
                .map(|&x| a.wrapping_mul(x).wrapping_add(b))
                .min()
                .expect("at least one shingle")
        })
        .collect();
    Ok(MinHashSignature {
        values,
        shingle_size,
        seed,
        whole_text,
    })
}

/// Fraction of positions where the signatures agree.
pub fn jaccard_estimate(a: &MinHashSignature, b: &MinHashSignature) -> Result<f64> {
    if a.values.len() != b.values.len() || a.shingle_size != b.shingle_size || a.seed != b.seed {
        return Err(Error::input(format!(
            "signature parameter mismatch: ({}, {}, {}) vs ({}, {}, {})",
            a.values.len(),
            a.shingle_size,
            a.seed,
            b.values.len(),
            b.shingle_size,
            b.seed
        )));
    }
    let matches = a
        .values
        .iter()
        .zip(&b.values)
        .filter(|(x, y)| x == y)
        .count();
    Ok(matches as f64 / a.values.len() as f64)
}

#[derive(Clone, Debug)]
pub struct MinHashParams {
    pub num_hashes: usize,
    pub shingle_size: usize,
    pub bands: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for MinHashParams {
    fn default() -> Self {
        // 16 bands of 8 rows put the LSH response curve's steep part
        // around 0.7, below the default 0.8 threshold.
        MinHashParams {
            num_hashes: 128,
            shingle_size: 5,
            bands: 16,
            threshold: 0.8,
            seed: 0,
        }
    }
}

impl MinHashParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_hashes == 0 || self.shingle_size == 0 {
            return Err(Error::config(
                "num_hashes and shingle_size must be positive".to_string(),
            ));
        }
        if self.bands == 0 || self.num_hashes % self.bands != 0 {
            return Err(Error::config(format!(
                "bands ({}) must divide num_hashes ({})",
                self.bands, self.num_hashes
            )));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::config(format!(
                "threshold must be in (0, 1], got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterReport {
    pub survivor: String,
    /// Dropped members with their estimated Jaccard against the survivor.
    pub duplicates: Vec<(String, f64)>,
}

#[derive(Clone, Debug)]
pub struct DedupOutcome {
    pub survivors: Vec<Document>,
    pub clusters: Vec<ClusterReport>,
}

impl DedupOutcome {
    pub fn render_report(&self) -> String {
        let mut out = String::new();
        for (i, c) in self.clusters.iter().enumerate() {
            out.push_str(&format!("cluster {i}: survivor {}\n", c.survivor));
            for (id, est) in &c.duplicates {
                out.push_str(&format!("  {id} est {est:.4}\n"));
            }
        }
        out.push_str(&format!(
            "{} clusters, {} survivors\n",
            self.clusters.len(),
            self.survivors.len()
        ));
        out
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind((0..n).collect())
    }
    fn find(&mut self, i: usize) -> usize {
        if self.0[i] != i {
            let root = self.find(self.0[i]);
            self.0[i] = root;
        }
        self.0[i]
    }
    fn union(&mut self, i: usize, j: usize) {
        let (ri, rj) = (self.find(i), self.find(j));
        if ri != rj {
            self.0[ri.max(rj)] = ri.min(rj);
        }
    }
}

fn lsh_candidates(sigs: &[MinHashSignature], bands: usize) -> HashSet<(usize, usize)> {
    let mut pairs = HashSet::new();
    if sigs.is_empty() {
        return pairs;
    }
    let rows = sigs[0].values.len() / bands;
    for band in 0..bands {
        let mut buckets: HashMap<&[u64], Vec<usize>> = HashMap::new();
        for (i, sig) in sigs.iter().enumerate() {
            buckets
                .entry(&sig.values[band * rows..(band + 1) * rows])
                .or_default()
                .push(i);
        }
        for members in buckets.values() {
            for (a, &i) in members.iter().enumerate() {
                for &j in &members[a + 1..] {
                    pairs.insert((i.min(j), i.max(j)));
                }
            }
        }
    }
    pairs
}

fn all_pair_candidates(n: usize) -> HashSet<(usize, usize)> {
    let mut pairs = HashSet::new();
    for i in 0..n {
        for j in i + 1..n {
            pairs.insert((i, j));
        }
    }
    pairs
}

/// Signatures for a batch of documents, computed on up to `workers`
/// threads. Each signature depends only on its own document and the
/// parameters, so the result is identical for any worker count.
fn batch_signatures(
    docs: &[Document],
    params: &MinHashParams,
    workers: usize,
) -> Result<Vec<MinHashSignature>> {
    let one = |d: &Document| {
        minhash_signature(&d.text, params.num_hashes, params.shingle_size, params.seed)
    };
    let workers = workers.min(docs.len()).max(1);
    if workers == 1 {
        return docs.iter().map(one).collect();
    }
    let chunk = docs.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = docs
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(one).collect::<Result<Vec<_>>>()))
            .collect();
        let mut sigs = Vec::with_capacity(docs.len());
        for h in handles {
            sigs.extend(h.join().expect("signature worker panicked")?);
        }
        Ok(sigs)
    })
}

fn dedup_with_candidates(
    docs: Vec<Document>,
    params: &MinHashParams,
    all_pairs: bool,
    workers: usize,
) -> Result<DedupOutcome> {
    params.validate()?;
    let sigs = batch_signatures(&docs, params, workers)?;

    let candidates = if all_pairs {
        all_pair_candidates(docs.len())
    } else {
        lsh_candidates(&sigs, params.bands)
    };

    // The threshold filter decides membership; union order only affects
    // intermediate state, but sorting by id keeps runs reproducible even
    // if candidate generation is ever parallelized.
    let mut qualifying: Vec<(usize, usize)> = Vec::new();
    for &(i, j) in &candidates {
        if jaccard_estimate(&sigs[i], &sigs[j])? >= params.threshold {
            qualifying.push((i, j));
        }
    }
    qualifying.sort_by(|&(a, b), &(c, d)| {
        (&docs[a].id, &docs[b].id).cmp(&(&docs[c].id, &docs[d].id))
    });

    let mut uf = UnionFind::new(docs.len());
    for &(i, j) in &qualifying {
        uf.union(i, j);
    }

    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in 0..docs.len() {
        groups.entry(uf.find(i)).or_default().push(i);
    }

    let mut keep = vec![true; docs.len()];
    let mut clusters = Vec::new();
    for members in groups.values() {
        if members.len() < 2 {
            continue;
        }
        let survivor = *members
            .iter()
            .min_by_key(|&&i| &docs[i].id)
            .expect("non-empty cluster");
        let mut duplicates = Vec::new();
        let mut ordered: Vec<usize> = members.iter().copied().filter(|&i| i != survivor).collect();
        ordered.sort_by(|&a, &b| docs[a].id.cmp(&docs[b].id));
        for i in ordered {
            keep[i] = false;
            duplicates.push((docs[i].id.clone(), jaccard_estimate(&sigs[survivor], &sigs[i])?));
        }
        clusters.push(ClusterReport {
            survivor: docs[survivor].id.clone(),
            duplicates,
        });
    }
    clusters.sort_by(|a, b| a.survivor.cmp(&b.survivor));

    let survivors = docs
        .into_iter()
        .zip(keep)
        .filter_map(|(d, k)| k.then_some(d))
        .collect();
    Ok(DedupOutcome {
        survivors,
        clusters,
    })
}

/// LSH-banded near-duplicate removal. The lowest id in each cluster
/// survives; survivor order follows the input.
pub fn minhash_dedup(docs: Vec<Document>, params: &MinHashParams) -> Result<DedupOutcome> {
    dedup_with_candidates(docs, params, false, 1)
}

/// [`minhash_dedup`] with the signature stage spread over `workers`
/// threads. Output is bit-identical for any worker count; clustering
/// itself stays single-threaded.
pub fn minhash_dedup_workers(
    docs: Vec<Document>,
    params: &MinHashParams,
    workers: usize,
) -> Result<DedupOutcome> {
    if workers == 0 {
        return Err(Error::config("workers must be at least 1".to_string()));
    }
    dedup_with_candidates(docs, params, false, workers)
}

/// Same clustering with every pair compared. Quadratic; used as the
/// reference the banded path is checked against.
pub fn minhash_dedup_all_pairs(
    docs: Vec<Document>,
    params: &MinHashParams,
) -> Result<DedupOutcome> {
    dedup_with_candidates(docs, params, true, 1)
}
