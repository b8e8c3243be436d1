//! Entropy-based router telemetry and expert-collapse detection.

use crate::error::{Error, Result};
use crate::model::LayerActivationRecord;

fn records_for_layer<'a>(
    records: &'a [LayerActivationRecord],
    layer: usize,
) -> Result<Vec<&'a LayerActivationRecord>> {
    let matched: Vec<_> = records.iter().filter(|r| r.layer == layer).collect();
    if matched.is_empty() {
        return Err(Error::input(format!("no activation records for layer {layer}")));
    }
    let n = matched[0].n_experts;
    for r in &matched {
        if r.n_experts != n {
            return Err(Error::contract(format!(
                "layer {layer} records disagree on expert count: {} vs {n}",
                r.n_experts
            )));
        }
    }
    Ok(matched)
}

fn assignment_frequencies(records: &[&LayerActivationRecord]) -> Result<Vec<f64>> {
    let n = records[0].n_experts;
    let mut counts = vec![0u64; n];
    let mut total = 0u64;
    for rec in records {
        for sel in &rec.selected {
            for &e in sel {
                if e >= n {
                    return Err(Error::contract(format!(
                        "selected expert {e} out of range for {n} experts"
                    )));
                }
                counts[e] += 1;
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::input("records contain no routed tokens".to_string()));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Shannon entropy of `dist` normalized by `log(len)`, so 1 is uniform and
/// 0 is a point mass. Zero entries contribute nothing.
fn normalized_entropy(dist: &[f64]) -> f64 {
    let n = dist.len();
    if n <= 1 {
        // A single-expert layer is vacuously balanced; treat as max entropy.
        return if n == 1 { 1.0 } else { 0.0 };
    }
    let mut h = 0.0;
    for &q in dist {
        if q > 0.0 {
            h -= q * q.ln();
        }
    }
    h / (n as f64).ln()
}

/// Balance of token-to-expert assignments at `layer`, in [0, 1]: the
/// normalized entropy of the empirical assignment frequency distribution.
/// 1.0 means perfectly uniform utilization, 0.0 means every assignment hit
/// one expert.
pub fn h_utilization(records: &[LayerActivationRecord], layer: usize) -> Result<f64> {
    let matched = records_for_layer(records, layer)?;
    let freqs = assignment_frequencies(&matched)?;
    Ok(normalized_entropy(&freqs))
}

/// Router confidence at `layer`, in [0, 1]: the mean over tokens of the
/// normalized entropy of each token's full router distribution. 0.0 means
/// one-hot (maximally confident) routing; 1.0 means uniform indifference.
pub fn h_sparsity(records: &[LayerActivationRecord], layer: usize) -> Result<f64> {
    let matched = records_for_layer(records, layer)?;
    let n = matched[0].n_experts;
    let mut total = 0.0;
    let mut tokens = 0usize;
    for rec in &matched {
        for dist in &rec.distribution {
            if dist.len() != n {
                return Err(Error::contract(format!(
                    "distribution width {} does not match {n} experts",
                    dist.len()
                )));
            }
            total += if n == 1 { 0.0 } else { normalized_entropy(dist) };
            tokens += 1;
        }
    }
    if tokens == 0 {
        return Err(Error::input("records contain no router distributions".to_string()));
    }
    Ok(total / tokens as f64)
}

/// Default collapse threshold: a tenth of an expert's uniform share.
pub fn default_collapse_threshold(n_experts: usize) -> f64 {
    0.1 / n_experts as f64
}

/// Experts whose assignment frequency falls strictly below `min_fraction`,
/// as (layer, expert) pairs sorted by layer then expert. Layers are taken
/// from the records present.
pub fn detect_collapse(
    records: &[LayerActivationRecord],
    min_fraction: f64,
) -> Result<Vec<(usize, usize)>> {
    let mut layers: Vec<usize> = records.iter().map(|r| r.layer).collect();
    layers.sort_unstable();
    layers.dedup();
    let mut collapsed = Vec::new();
    for layer in layers {
        let matched = records_for_layer(records, layer)?;
        let freqs = assignment_frequencies(&matched)?;
        for (expert, &f) in freqs.iter().enumerate() {
            if f < min_fraction {
                collapsed.push((layer, expert));
            }
        }
    }
    Ok(collapsed)
}

/// Per-layer telemetry rollup over a batch of records.
#[derive(Clone, Debug, PartialEq)]
pub struct TelemetryReport {
    /// (layer, H_utilization, H_sparsity) per MoE layer present, ascending.
    pub per_layer: Vec<(usize, f64, f64)>,
    pub collapsed: Vec<(usize, usize)>,
    pub collapse_threshold: f64,
}

impl TelemetryReport {
    pub fn from_records(
        records: &[LayerActivationRecord],
        collapse_threshold: f64,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::input("no activation records".to_string()));
        }
        let mut layers: Vec<usize> = records.iter().map(|r| r.layer).collect();
        layers.sort_unstable();
        layers.dedup();
        let mut per_layer = Vec::with_capacity(layers.len());
        for &layer in &layers {
            per_layer.push((
                layer,
                h_utilization(records, layer)?,
                h_sparsity(records, layer)?,
            ));
        }
        Ok(TelemetryReport {
            per_layer,
            collapsed: detect_collapse(records, collapse_threshold)?,
            collapse_threshold,
        })
    }

    pub fn mean_h_utilization(&self) -> f64 {
        self.per_layer.iter().map(|&(_, u, _)| u).sum::<f64>() / self.per_layer.len() as f64
    }

    pub fn mean_h_sparsity(&self) -> f64 {
        self.per_layer.iter().map(|&(_, _, s)| s).sum::<f64>() / self.per_layer.len() as f64
    }

    pub fn render_text(&self) -> String {
        let mut out = String::from("layer\tH_utilization\tH_sparsity\n");
        for &(layer, u, s) in &self.per_layer {
            out.push_str(&format!("{layer}\t{u:.6}\t{s:.6}\n"));
        }
        if self.collapsed.is_empty() {
            out.push_str(&format!(
                "no collapsed experts at threshold {}\n",
                self.collapse_threshold
            ));
        } else {
            for &(layer, expert) in &self.collapsed {
                out.push_str(&format!(
                    "collapsed: layer {layer} expert {expert} (threshold {})\n",
                    self.collapse_threshold
                ));
            }
        }
        out
    }
}
