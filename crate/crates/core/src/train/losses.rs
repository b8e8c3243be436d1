//! Cross-entropy SFT loss and the auxiliary load-balancing loss.

use crate::error::{Error, Result};
use crate::model::LayerActivationRecord;
use crate::tensor::{Graph, TensorId};

/// Mean negative log-likelihood of `targets` under `logits` over the
/// positions where `mask` is true. Prompt tokens are excluded by masking
/// them out.
pub fn sft_loss(
    g: &mut Graph,
    logits: TensorId,
    targets: &[usize],
    mask: &[bool],
) -> Result<TensorId> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(Error::contract(format!(
            "sft_loss expects [positions, vocab] logits, got {shape:?}"
        )));
    }
    if targets.len() != shape[0] || mask.len() != shape[0] {
        return Err(Error::input(format!(
            "{} logit rows but {} targets and {} mask entries",
            shape[0],
            targets.len(),
            mask.len()
        )));
    }
    let n_active = mask.iter().filter(|&&m| m).count();
    if n_active == 0 {
        return Err(Error::input("every position is masked out".to_string()));
    }
    let lsm = g.log_softmax(logits, 1)?;
    let picked = g.pick_per_row(lsm, targets)?;
    let mask_values: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let mask_t = g.constant(mask_values, &[targets.len()])?;
    let masked = g.mul(picked, mask_t)?;
    let total = g.sum(masked);
    Ok(g.scale(total, -1.0 / n_active as f64))
}

/// Switch-style auxiliary balance penalty, averaged over layers. Per layer
/// the value is `N * sum_i f_i P_i` where `f_i` is the fraction of top-k
/// assignments landing on expert `i` and `P_i` the mean full-softmax
/// probability of expert `i`. Uniform matched distributions give exactly 1;
/// note the product form only bounds the value below by 1 when f and P
/// coincide.
pub fn load_balancing_loss(records: &[LayerActivationRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::input("no activation records".to_string()));
    }
    let mut total = 0.0;
    for rec in records {
        total += layer_balance(rec)?;
    }
    Ok(total / records.len() as f64)
}

fn layer_balance(rec: &LayerActivationRecord) -> Result<f64> {
    let n = rec.n_experts;
    let tokens = rec.n_tokens();
    if tokens == 0 || n == 0 {
        return Err(Error::input(format!(
            "layer {} record has no routed tokens",
            rec.layer
        )));
    }
    let mut counts = vec![0usize; n];
    let mut assignments = 0usize;
    for sel in &rec.selected {
        for &e in sel {
            if e >= n {
                return Err(Error::contract(format!(
                    "selected expert {e} out of range for {n} experts"
                )));
            }
            counts[e] += 1;
            assignments += 1;
        }
    }
    if assignments == 0 {
        return Err(Error::input(format!(
            "layer {} record has empty selections",
            rec.layer
        )));
    }
    let mut p_sum = vec![0.0; n];
    for dist in &rec.distribution {
        if dist.len() != n {
            return Err(Error::contract(format!(
                "distribution width {} does not match {} experts",
                dist.len(),
                n
            )));
        }
        for (i, &v) in dist.iter().enumerate() {
            p_sum[i] += v;
        }
    }
    let mut dot = 0.0;
    for i in 0..n {
        let f_i = counts[i] as f64 / assignments as f64;
        let p_i = p_sum[i] / tokens as f64;
        dot += f_i * p_i;
    }
    Ok(n as f64 * dot)
}

/// Differentiable twin of [`load_balancing_loss`] over router affinity
/// nodes. The assignment fractions enter as constants (top-k selection is
/// not differentiable); gradients flow through the softmax distributions.
/// `records[i]` must describe the same tokens as `affinities[i]`.
pub fn load_balancing_loss_tape(
    g: &mut Graph,
    affinities: &[TensorId],
    records: &[LayerActivationRecord],
) -> Result<TensorId> {
    if affinities.is_empty() || affinities.len() != records.len() {
        return Err(Error::input(format!(
            "{} affinity nodes for {} records",
            affinities.len(),
            records.len()
        )));
    }
    let mut per_layer = Vec::with_capacity(records.len());
    for (&aff, rec) in affinities.iter().zip(records) {
        let shape = g.shape(aff).to_vec();
        let tokens = rec.n_tokens();
        let n = rec.n_experts;
        if shape != [tokens, n] {
            return Err(Error::contract(format!(
                "affinity shape {shape:?} does not match record with {tokens} tokens x {n} experts"
            )));
        }
        let mut counts = vec![0usize; n];
        let mut assignments = 0usize;
        for sel in &rec.selected {
            for &e in sel {
                counts[e] += 1;
                assignments += 1;
            }
        }
        if assignments == 0 {
            return Err(Error::input(format!(
                "layer {} record has empty selections",
                rec.layer
            )));
        }
        let f_row: Vec<f64> = counts
            .iter()
            .map(|&c| c as f64 / assignments as f64)
            .collect();
        let probs = g.softmax(aff, 1)?;
        let ones = g.constant(vec![1.0 / tokens as f64; tokens], &[1, tokens])?;
        let p_mean = g.matmul(ones, probs)?;
        let f_const = g.constant(f_row, &[1, n])?;
        let prod = g.mul(p_mean, f_const)?;
        let dot = g.sum(prod);
        per_layer.push(g.scale(dot, n as f64));
    }
    let mut acc = per_layer[0];
    for &t in &per_layer[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / records.len() as f64))
}
