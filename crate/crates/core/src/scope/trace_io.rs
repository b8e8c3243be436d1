//! Trace and embedding file formats, plus the model-driven trace runner.
//!
//! Traces are line-delimited JSON, one record per (sample, layer, token),
//! so external tools can stream them. Embeddings are a plain text matrix
//! with a header carrying the shape and top_k.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio::atomic_write;
use crate::model::{LayerActivationRecord, MoeLm, SteeringPlan};
use crate::scope::embedding::{RoutingEmbedding, RoutingTrace};

#[derive(Serialize, Deserialize)]
struct TraceLine {
    sample: String,
    layer: usize,
    token: usize,
    selected: Vec<usize>,
    distribution: Vec<f64>,
    gates: Vec<f64>,
}

/// Runs the plain forward pass over each (id, tokens) sample and collects
/// per-sample routing traces.
pub fn trace_samples(
    model: &MoeLm,
    samples: &[(String, Vec<u32>)],
    steering: Option<&SteeringPlan>,
) -> Result<Vec<RoutingTrace>> {
    let mut traces = Vec::with_capacity(samples.len());
    for (id, tokens) in samples {
        let out = model.forward(tokens, steering)?;
        traces.push(RoutingTrace {
            sample_id: id.clone(),
            n_tokens: tokens.len(),
            records: out.records,
        });
    }
    Ok(traces)
}

pub fn write_traces(path: &Path, traces: &[RoutingTrace]) -> Result<String> {
    let mut out = String::new();
    for trace in traces {
        for rec in &trace.records {
            for token in 0..rec.n_tokens() {
                let line = TraceLine {
                    sample: trace.sample_id.clone(),
                    layer: rec.layer,
                    token,
                    selected: rec.selected[token].clone(),
                    distribution: rec.distribution[token].clone(),
                    gates: rec.gates[token].clone(),
                };
                out.push_str(&serde_json::to_string(&line).map_err(|e| {
                    Error::contract(format!("trace serialization failed: {e}"))
                })?);
                out.push('\n');
            }
        }
    }
    atomic_write(path, out.as_bytes())?;
    Ok(out)
}

/// Reads a trace file back, grouping lines by sample in first-seen order.
/// Lines must arrive token-ordered within each (sample, layer) group.
pub fn read_traces(path: &Path) -> Result<Vec<RoutingTrace>> {
    let text = std::fs::read_to_string(path)?;
    let mut order: Vec<String> = Vec::new();
    let mut by_sample: std::collections::HashMap<String, Vec<LayerActivationRecord>> =
        std::collections::HashMap::new();

    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine = serde_json::from_str(line).map_err(|e| {
            Error::input(format!("trace line {}: {e}", lineno + 1))
        })?;
        if !by_sample.contains_key(&parsed.sample) {
            order.push(parsed.sample.clone());
            by_sample.insert(parsed.sample.clone(), Vec::new());
        }
        let records = by_sample.get_mut(&parsed.sample).unwrap();
        let rec = match records.iter_mut().find(|r| r.layer == parsed.layer) {
            Some(rec) => rec,
            None => {
                records.push(LayerActivationRecord {
                    layer: parsed.layer,
                    n_experts: parsed.distribution.len(),
                    selected: Vec::new(),
                    distribution: Vec::new(),
                    gates: Vec::new(),
                });
                records.last_mut().unwrap()
            }
        };
        if parsed.token != rec.selected.len() {
            return Err(Error::input(format!(
                "trace line {}: token {} arrived out of order (expected {})",
                lineno + 1,
                parsed.token,
                rec.selected.len()
            )));
        }
        if parsed.distribution.len() != rec.n_experts {
            return Err(Error::input(format!(
                "trace line {}: distribution width {} changed mid-sample (expected {})",
                lineno + 1,
                parsed.distribution.len(),
                rec.n_experts
            )));
        }
        rec.selected.push(parsed.selected);
        rec.distribution.push(parsed.distribution);
        rec.gates.push(parsed.gates);
    }

    let mut traces = Vec::with_capacity(order.len());
    for id in order {
        let mut records = by_sample.remove(&id).unwrap();
        records.sort_by_key(|r| r.layer);
        let n_tokens = records.first().map(|r| r.n_tokens()).unwrap_or(0);
        for rec in &records {
            if rec.n_tokens() != n_tokens {
                return Err(Error::input(format!(
                    "sample {:?}: layer {} has {} tokens, layer {} has {}",
                    id,
                    records[0].layer,
                    n_tokens,
                    rec.layer,
                    rec.n_tokens()
                )));
            }
        }
        traces.push(RoutingTrace {
            sample_id: id,
            n_tokens,
            records,
        });
    }
    Ok(traces)
}

/// Matrix text format: a header line `layers experts top_k source_tokens`,
/// then one whitespace-separated row of values per layer. Values print in
/// Rust's shortest round-trip form, so read-back is bit-exact.
pub fn write_embedding(path: &Path, emb: &RoutingEmbedding) -> Result<()> {
    let mut out = format!(
        "{} {} {} {}\n",
        emb.n_layers, emb.n_experts, emb.top_k, emb.source_tokens
    );
    for layer in 0..emb.n_layers {
        let row = emb.row(layer)?;
        let rendered: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&rendered.join(" "));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_embedding(path: &Path) -> Result<RoutingEmbedding> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::input("empty embedding file".to_string()))?;
    let fields: Vec<usize> = header
        .split_whitespace()
        .map(|f| {
            f.parse::<usize>()
                .map_err(|e| Error::input(format!("bad embedding header field {f:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    let [n_layers, n_experts, top_k, source_tokens] = fields[..] else {
        return Err(Error::input(format!(
            "embedding header needs 4 fields, got {}",
            fields.len()
        )));
    };
    let mut values = Vec::with_capacity(n_layers * n_experts);
    for line in lines {
        for field in line.split_whitespace() {
            values.push(field.parse::<f64>().map_err(|e| {
                Error::input(format!("bad embedding value {field:?}: {e}"))
            })?);
        }
    }
    RoutingEmbedding::from_values(n_layers, n_experts, top_k, source_tokens, values)
}
