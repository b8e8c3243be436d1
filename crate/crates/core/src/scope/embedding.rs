//! Routing embeddings: per-sample matrices of expert activation
//! frequencies, plus the filter/steer pipeline built on them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{LayerActivationRecord, ModelConfig, SteeringPlan};

/// Routing activity of one text sample: one activation record per MoE
/// layer, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTrace {
    pub sample_id: String,
    pub n_tokens: usize,
    pub records: Vec<LayerActivationRecord>,
}

impl RoutingTrace {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.records.len() != config.n_moe_layers() {
            return Err(Error::input(format!(
                "trace {:?} has {} layer records, model has {} MoE layers",
                self.sample_id,
                self.records.len(),
                config.n_moe_layers()
            )));
        }
        for rec in &self.records {
            if rec.n_tokens() != self.n_tokens {
                return Err(Error::input(format!(
                    "trace {:?} layer {} covers {} tokens, sample has {}",
                    self.sample_id,
                    rec.layer,
                    rec.n_tokens(),
                    self.n_tokens
                )));
            }
            for sel in &rec.selected {
                if sel.len() != config.top_k {
                    return Err(Error::input(format!(
                        "trace {:?} layer {} selects {} experts per token, expected top_k {}",
                        self.sample_id,
                        rec.layer,
                        sel.len(),
                        config.top_k
                    )));
                }
            }
        }
        Ok(())
    }
}

/// An l x e matrix of routed-expert activation frequencies. Shared experts
/// are excluded: only router selections are counted. Embeddings built from
/// a trace keep the integer activation counts, so row sums reproduce top_k
/// exactly; derived embeddings (means, filtered masks) carry values only.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingEmbedding {
    pub n_layers: usize,
    pub n_experts: usize,
    pub top_k: usize,
    /// Tokens behind the counts; for a mean embedding, the total across its
    /// inputs.
    pub source_tokens: usize,
    counts: Option<Vec<u64>>,
    values: Vec<f64>,
}

impl RoutingEmbedding {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, layer: usize) -> Result<&[f64]> {
        if layer >= self.n_layers {
            return Err(Error::input(format!(
                "layer {layer} out of range for {} layers",
                self.n_layers
            )));
        }
        Ok(&self.values[layer * self.n_experts..(layer + 1) * self.n_experts])
    }

    /// Row sum over experts. For count-backed embeddings the sum runs over
    /// the integers first, so a well-formed trace row yields top_k exactly.
    pub fn row_sum(&self, layer: usize) -> Result<f64> {
        if layer >= self.n_layers {
            return Err(Error::input(format!(
                "layer {layer} out of range for {} layers",
                self.n_layers
            )));
        }
        match &self.counts {
            Some(counts) => {
                let total: u64 = counts[layer * self.n_experts..(layer + 1) * self.n_experts]
                    .iter()
                    .sum();
                Ok(total as f64 / self.source_tokens as f64)
            }
            None => Ok(self.row(layer)?.iter().sum()),
        }
    }

    /// Construct directly from values, e.g. when reading an exported matrix.
    pub fn from_values(
        n_layers: usize,
        n_experts: usize,
        top_k: usize,
        source_tokens: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != n_layers * n_experts {
            return Err(Error::input(format!(
                "{} values for a {n_layers} x {n_experts} embedding",
                values.len()
            )));
        }
        Ok(RoutingEmbedding {
            n_layers,
            n_experts,
            top_k,
            source_tokens,
            counts: None,
            values,
        })
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.n_layers == other.n_layers
            && self.n_experts == other.n_experts
            && self.top_k == other.top_k
    }
}

/// Count routed-expert activations over one sample and normalize by its
/// token count.
pub fn routing_embedding(trace: &RoutingTrace) -> Result<RoutingEmbedding> {
    if trace.n_tokens == 0 || trace.records.is_empty() {
        return Err(Error::input(format!(
            "trace {:?} has no tokens to embed",
            trace.sample_id
        )));
    }
    let n_experts = trace.records[0].n_experts;
    let top_k = trace.records[0]
        .selected
        .first()
        .map(|s| s.len())
        .unwrap_or(0);
    if top_k == 0 {
        return Err(Error::input(format!(
            "trace {:?} has empty expert selections",
            trace.sample_id
        )));
    }
    let n_layers = trace.records.len();
    let mut counts = vec![0u64; n_layers * n_experts];
    for (li, rec) in trace.records.iter().enumerate() {
        if rec.n_experts != n_experts {
            return Err(Error::input(format!(
                "trace {:?} mixes expert counts {} and {n_experts}",
                trace.sample_id, rec.n_experts
            )));
        }
        if rec.n_tokens() != trace.n_tokens {
            return Err(Error::input(format!(
                "trace {:?} layer {} covers {} tokens, sample has {}",
                trace.sample_id,
                rec.layer,
                rec.n_tokens(),
                trace.n_tokens
            )));
        }
        for sel in &rec.selected {
            if sel.len() != top_k {
                return Err(Error::input(format!(
                    "trace {:?} has ragged selections ({} vs top_k {top_k})",
                    trace.sample_id,
                    sel.len()
                )));
            }
            for &e in sel {
                if e >= n_experts {
                    return Err(Error::input(format!(
                        "trace {:?} selects expert {e}, only {n_experts} exist",
                        trace.sample_id
                    )));
                }
                counts[li * n_experts + e] += 1;
            }
        }
    }
    let tokens = trace.n_tokens as f64;
    let values = counts.iter().map(|&c| c as f64 / tokens).collect();
    Ok(RoutingEmbedding {
        n_layers,
        n_experts,
        top_k,
        source_tokens: trace.n_tokens,
        counts: Some(counts),
        values,
    })
}

/// Entrywise arithmetic mean of same-shape embeddings, e.g. over the
/// samples of one domain cluster.
pub fn domain_embedding(embeddings: &[RoutingEmbedding]) -> Result<RoutingEmbedding> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::input("cannot average zero embeddings".to_string()))?;
    for e in embeddings {
        if !first.same_shape(e) {
            return Err(Error::input(format!(
                "embedding shapes differ: {}x{} top_k {} vs {}x{} top_k {}",
                first.n_layers, first.n_experts, first.top_k, e.n_layers, e.n_experts, e.top_k
            )));
        }
    }
    let m = embeddings.len() as f64;
    let mut values = vec![0.0; first.values.len()];
    for e in embeddings {
        for (acc, &v) in values.iter_mut().zip(&e.values) {
            *acc += v;
        }
    }
    for v in &mut values {
        *v /= m;
    }
    Ok(RoutingEmbedding {
        n_layers: first.n_layers,
        n_experts: first.n_experts,
        top_k: first.top_k,
        source_tokens: embeddings.iter().map(|e| e.source_tokens).sum(),
        counts: None,
        values,
    })
}

/// Zero every entry below `3 / n_experts`, keeping only experts activated
/// at least three times their uniform share. The result is a mask source;
/// its rows no longer sum to top_k.
pub fn filter_embedding(emb: &RoutingEmbedding, n_experts: usize) -> Result<RoutingEmbedding> {
    if n_experts != emb.n_experts {
        return Err(Error::input(format!(
            "filter expert count {n_experts} does not match embedding with {}",
            emb.n_experts
        )));
    }
    let threshold = 3.0 / n_experts as f64;
    let values: Vec<f64> = emb
        .values
        .iter()
        .map(|&v| if v < threshold { 0.0 } else { v })
        .collect();
    Ok(RoutingEmbedding {
        n_layers: emb.n_layers,
        n_experts: emb.n_experts,
        top_k: emb.top_k,
        source_tokens: emb.source_tokens,
        counts: None,
        values,
    })
}

/// Additive per-expert affinity bias for one MoE layer: `strength` times
/// the filtered embedding row. Zero stays zero, so unfiltered experts are
/// never promoted.
pub fn steering_bias(
    filtered: &RoutingEmbedding,
    layer: usize,
    strength: f64,
) -> Result<Vec<f64>> {
    if !(strength >= 0.0 && strength.is_finite()) {
        return Err(Error::input(format!(
            "steering strength must be a non-negative finite number, got {strength}"
        )));
    }
    let row = filtered.row(layer)?;
    Ok(row.iter().map(|&v| strength * v).collect())
}

/// Builds a whole-model steering plan from a filtered embedding.
pub fn steering_plan(filtered: &RoutingEmbedding, strength: f64) -> Result<SteeringPlan> {
    let mut biases = Vec::with_capacity(filtered.n_layers);
    for layer in 0..filtered.n_layers {
        biases.push(steering_bias(filtered, layer, strength)?);
    }
    Ok(SteeringPlan { biases })
}

/// Seeded k-means over flattened embeddings. Returns one label per input,
/// deterministic for a fixed seed. All-identical inputs end up in a single
/// cluster.
pub fn cluster_embeddings(
    embeddings: &[RoutingEmbedding],
    n_clusters: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if n_clusters == 0 {
        return Err(Error::config("n_clusters must be positive".to_string()));
    }
    if n_clusters > embeddings.len() {
        return Err(Error::input(format!(
            "{n_clusters} clusters requested for {} embeddings",
            embeddings.len()
        )));
    }
    let first = &embeddings[0];
    for e in embeddings {
        if !first.same_shape(e) {
            return Err(Error::input("embedding shapes differ".to_string()));
        }
    }
    let points: Vec<&[f64]> = embeddings.iter().map(|e| e.values.as_slice()).collect();
    let dim = points[0].len();
    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        let mut acc = 0.0;
        for i in 0..dim {
            let d = a[i] - b[i];
            acc += d * d;
        }
        acc
    };

    // k-means++ seeding: start uniformly, then weight by squared distance
    // to the nearest chosen center. Degenerate weights fall back to the
    // first unchosen point.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut center_idx: Vec<usize> = vec![rng.random_range(0..points.len())];
    while center_idx.len() < n_clusters {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| {
                center_idx
                    .iter()
                    .map(|&c| dist2(p, points[c]))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &w) in weights.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            (0..points.len())
                .find(|i| !center_idx.contains(i))
                .unwrap_or(0)
        };
        center_idx.push(next);
    }
    let mut centers: Vec<Vec<f64>> = center_idx.iter().map(|&i| points[i].to_vec()).collect();

    let mut labels = vec![0usize; points.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = dist2(p, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&&[f64]> = points
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == c)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            for d in 0..dim {
                center[d] = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    Ok(labels)
}
