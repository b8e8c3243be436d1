//! One binary for the whole toolkit: pretraining, preference tuning,
//! routing analysis and steering, tokenizer work, corpus dedup, PassKey
//! suites, and emissions arithmetic.
//!
//! Every subcommand is deterministic given its inputs and seed, file
//! outputs are written atomically, and errors come back as a single
//! stderr line whose prefix names the failure class. Exit codes: 0
//! success, 2 config error, 3 input error, 4 numerical error.

mod common;
mod data_cmds;
mod scope_cmds;
mod tok_cmds;
mod train_cmds;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "moelab",
    version,
    about = "Desk-scale mixture-of-experts language model toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from scratch on a token corpus
    Pretrain(train_cmds::PretrainArgs),
    /// Preference-tune a checkpoint on (prompt, chosen, rejected) pairs
    Dpo(train_cmds::DpoArgs),
    /// Record routing traces, a domain embedding, and router telemetry
    Trace(scope_cmds::TraceArgs),
    /// Generate tokens with expert steering from a domain embedding
    Steer(scope_cmds::SteerArgs),
    /// Tokenizer training and evaluation
    #[command(subcommand)]
    Tok(tok_cmds::TokCmd),
    /// Remove duplicate documents from a corpus
    Dedup(data_cmds::DedupArgs),
    /// PassKey retrieval suites
    #[command(subcommand)]
    Passkey(data_cmds::PasskeyCmd),
    /// Training emissions estimate in kilograms of CO2
    Emissions(scope_cmds::EmissionsArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Pretrain(a) => train_cmds::pretrain(a),
        Cmd::Dpo(a) => train_cmds::dpo(a),
        Cmd::Trace(a) => scope_cmds::trace(a),
        Cmd::Steer(a) => scope_cmds::steer(a),
        Cmd::Tok(c) => tok_cmds::run(c),
        Cmd::Dedup(a) => data_cmds::dedup(a),
        Cmd::Passkey(c) => data_cmds::passkey(c),
        Cmd::Emissions(a) => scope_cmds::emissions(a),
    };
    if let Err(e) = result {
        eprintln!("{}", e.to_string().replace('\n', "; "));
        std::process::exit(e.exit_code());
    }
}
