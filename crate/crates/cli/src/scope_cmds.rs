//! `trace`, `steer`, and `emissions`: reading a trained model's routing
//! behavior, bending it, and the footprint arithmetic.

use std::path::PathBuf;

use clap::Args;

use moelab_core::fsio::atomic_write;
use moelab_core::model::MoeLm;
use moelab_core::scope::{
    co2_estimate, default_collapse_threshold, domain_embedding, filter_embedding, read_embedding,
    routing_embedding, steering_plan, trace_samples, write_embedding, write_traces, EmissionsInput,
    TelemetryReport,
};
use moelab_core::{Error, Result};

use crate::common;

#[derive(Args)]
pub struct TraceArgs {
    /// Model checkpoint to trace
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus: jsonl records or a directory of text files
    #[arg(long)]
    corpus: PathBuf,
    /// Tokenizer vocab; byte identity when omitted
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Directory for traces.tsv, domain.emb, telemetry.txt
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

pub fn trace(a: TraceArgs) -> Result<()> {
    common::check_workers(a.workers)?;
    let model = MoeLm::load(&a.checkpoint)?;
    let vocab = common::load_vocab(a.vocab.as_deref())?;
    let docs = common::read_documents(&a.corpus)?;

    let ctx = model.config.context_len;
    let mut samples = Vec::new();
    for d in &docs {
        let mut ids = common::encode_checked(&d.id, &d.text, &vocab, model.config.vocab_size)?;
        ids.truncate(ctx);
        if !ids.is_empty() {
            samples.push((d.id.clone(), ids));
        }
    }
    if samples.is_empty() {
        return Err(Error::input("corpus produced no non-empty samples".to_string()));
    }

    let traces = trace_samples(&model, &samples, None)?;
    std::fs::create_dir_all(&a.out)?;
    write_traces(&a.out.join("traces.tsv"), &traces)?;

    let embeddings = traces.iter().map(routing_embedding).collect::<Result<Vec<_>>>()?;
    let domain = domain_embedding(&embeddings)?;
    write_embedding(&a.out.join("domain.emb"), &domain)?;

    let records: Vec<_> = traces.iter().flat_map(|t| t.records.iter().cloned()).collect();
    let report = TelemetryReport::from_records(
        &records,
        default_collapse_threshold(model.config.n_routed_experts),
    )?;
    let text = report.render_text();
    atomic_write(&a.out.join("telemetry.txt"), text.as_bytes())?;

    print!("{text}");
    println!("samples {}", samples.len());
    println!("traces {}", a.out.join("traces.tsv").display());
    println!("embedding {}", a.out.join("domain.emb").display());
    Ok(())
}

#[derive(Args)]
pub struct SteerArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Domain embedding file from `trace`
    #[arg(long)]
    embedding: PathBuf,
    /// Bias strength added to the steered experts' affinities
    #[arg(long, default_value_t = 100.0)]
    strength: f64,
    /// Prompt text, tokenized with --vocab (byte identity when omitted)
    #[arg(long)]
    prompt: String,
    /// Tokens to generate
    #[arg(long, default_value_t = 64)]
    max_new: usize,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// When given, also writes the steered routing trace here
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn steer(a: SteerArgs) -> Result<()> {
    let model = MoeLm::load(&a.checkpoint)?;
    let emb = read_embedding(&a.embedding)?;
    let filtered = filter_embedding(&emb, model.config.n_routed_experts)?;
    let plan = steering_plan(&filtered, a.strength)?;

    let vocab = common::load_vocab(a.vocab.as_deref())?;
    let prompt = common::encode_checked("prompt", &a.prompt, &vocab, model.config.vocab_size)?;
    if prompt.is_empty() {
        return Err(Error::input("prompt tokenized to nothing".to_string()));
    }

    let tokens = model.generate(&prompt, a.max_new, Some(&plan))?;
    let ids = tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
    println!("tokens {ids}");
    // Text is a best-effort rendering: a model's vocab may be larger than
    // the tokenizer's, in which case generated ids have no byte spelling.
    match vocab.decode(&tokens) {
        Ok(bytes) => println!("text {}", String::from_utf8_lossy(&bytes).replace('\n', "\\n")),
        Err(_) => println!("text <ids outside the tokenizer vocab>"),
    }

    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        let traces = trace_samples(&model, &[("steered".to_string(), tokens)], Some(&plan))?;
        let path = out.join("steered-trace.tsv");
        write_traces(&path, &traces)?;
        atomic_write(&out.join("tokens.txt"), format!("{ids}\n").as_bytes())?;
        println!("trace {}", path.display());
    }
    Ok(())
}

#[derive(Args)]
pub struct EmissionsArgs {
    /// Data-center power usage effectiveness (total power / IT power)
    pue: f64,
    /// Energy drawn by the run, kilowatt-hours
    kwh: f64,
    /// Grid carbon intensity, grams of CO2 per kilowatt-hour
    intensity: f64,
}

pub fn emissions(a: EmissionsArgs) -> Result<()> {
    let kg = co2_estimate(&EmissionsInput {
        pue: a.pue,
        kwh: a.kwh,
        intensity: a.intensity,
    })?;
    println!("{kg:.3} kg");
    Ok(())
}
