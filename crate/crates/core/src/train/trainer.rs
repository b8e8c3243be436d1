//! The pretraining and preference-tuning loops.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fsio::atomic_write;
use crate::kvtext::KvReader;
use crate::model::MoeLm;
use crate::scope::{h_sparsity, h_utilization};
use crate::tensor::Graph;
use crate::train::adamw::{AdamW, AdamWConfig};
use crate::train::dpo::{dpo_loss_tape, DpoConfig, PreferencePair};
use crate::train::losses::{load_balancing_loss_tape, sft_loss};
use crate::train::schedule::{cosine_lr_at, lr_at, CosineScheduleSpec, MultiStepScheduleSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    MultiStep,
    Cosine,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "multistep" => Ok(ScheduleKind::MultiStep),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::config(format!(
                "unknown schedule {other:?}; expected multistep or cosine"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::MultiStep => "multistep",
            ScheduleKind::Cosine => "cosine",
        }
    }
}

/// Everything the training loops need beyond the model itself. Parsed from
/// the same key/value text as the model config; see `from_reader`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub seq_len: usize,
    pub batch_size: usize,
    pub total_steps: usize,
    pub schedule: ScheduleKind,
    pub warmup_steps: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub drop_fractions: Vec<f64>,
    pub drop_factor: f64,
    pub aux_loss_weight: f64,
    pub adamw: AdamWConfig,
    pub keep_checkpoints: usize,
    pub dpo: DpoConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            seq_len: 64,
            batch_size: 4,
            total_steps: 500,
            schedule: ScheduleKind::MultiStep,
            // 2% of the run, the same warmup fraction as the full-scale
            // schedule (2000 of 100k).
            warmup_steps: 10,
            base_lr: 1e-4,
            min_lr: 0.0,
            drop_fractions: vec![0.30, 0.60, 0.90, 0.98],
            drop_factor: 0.25,
            aux_loss_weight: 0.01,
            adamw: AdamWConfig::default(),
            keep_checkpoints: 2,
            dpo: DpoConfig::new(0.1, 0.1),
        }
    }
}

impl TrainConfig {
    /// Reads fields from an open reader so model and training keys can live
    /// in one file. Missing keys fall back to defaults; `warmup_steps`
    /// defaults to 2% of `total_steps`.
    pub fn from_reader(r: &mut KvReader) -> Result<Self> {
        let d = TrainConfig::default();
        let total_steps = r.take_usize("total_steps", d.total_steps)?;
        let cfg = TrainConfig {
            seed: r.take_u64("seed", d.seed)?,
            seq_len: r.take_usize("seq_len", d.seq_len)?,
            batch_size: r.take_usize("batch_size", d.batch_size)?,
            total_steps,
            schedule: ScheduleKind::parse(&r.take_string("schedule", d.schedule.as_str()))?,
            warmup_steps: r.take_usize("warmup_steps", total_steps / 50)?,
            base_lr: r.take_f64("base_lr", d.base_lr)?,
            min_lr: r.take_f64("min_lr", d.min_lr)?,
            drop_fractions: r.take_f64_list("drop_fractions", &d.drop_fractions)?,
            drop_factor: r.take_f64("drop_factor", d.drop_factor)?,
            aux_loss_weight: r.take_f64("aux_loss_weight", d.aux_loss_weight)?,
            adamw: AdamWConfig {
                beta1: r.take_f64("adam_beta1", d.adamw.beta1)?,
                beta2: r.take_f64("adam_beta2", d.adamw.beta2)?,
                eps: r.take_f64("adam_eps", d.adamw.eps)?,
                weight_decay: r.take_f64("weight_decay", d.adamw.weight_decay)?,
            },
            keep_checkpoints: r.take_usize("keep_checkpoints", d.keep_checkpoints)?,
            dpo: DpoConfig {
                beta_w: r.take_f64("dpo_beta_w", d.dpo.beta_w)?,
                beta_l: r.take_f64("dpo_beta_l", d.dpo.beta_l)?,
                nll_term_coefficient: r
                    .take_f64("dpo_nll_coefficient", d.dpo.nll_term_coefficient)?,
                negate_nll_term: r.take_bool("dpo_negate_nll", d.dpo.negate_nll_term)?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut r = KvReader::from_text(text)?;
        let cfg = Self::from_reader(&mut r)?;
        r.finish()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::config(format!(
                "seq_len, batch_size, and total_steps must be positive (got {}, {}, {})",
                self.seq_len, self.batch_size, self.total_steps
            )));
        }
        if !(self.aux_loss_weight >= 0.0 && self.aux_loss_weight.is_finite()) {
            return Err(Error::config(format!(
                "aux_loss_weight must be non-negative, got {}",
                self.aux_loss_weight
            )));
        }
        self.adamw.validate()?;
        self.dpo.validate()?;
        match self.schedule {
            ScheduleKind::MultiStep => self.multistep_spec().validate(),
            ScheduleKind::Cosine => self.cosine_spec().validate(),
        }
    }

    fn multistep_spec(&self) -> MultiStepScheduleSpec {
        MultiStepScheduleSpec {
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
            base_lr: self.base_lr,
            drop_fractions: self.drop_fractions.clone(),
            drop_factor: self.drop_factor,
        }
    }

    fn cosine_spec(&self) -> CosineScheduleSpec {
        CosineScheduleSpec {
            warmup_steps: self.warmup_steps,
            max_steps: self.total_steps,
            base_lr: self.base_lr,
            min_lr: self.min_lr,
        }
    }

    pub fn lr_for_step(&self, step: usize) -> Result<f64> {
        match self.schedule {
            ScheduleKind::MultiStep => lr_at(&self.multistep_spec(), step),
            ScheduleKind::Cosine => cosine_lr_at(&self.cosine_spec(), step),
        }
    }
}

/// Summary of a finished run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub final_checkpoint: PathBuf,
    pub telemetry_path: PathBuf,
}

struct TelemetryLog {
    path: PathBuf,
    lines: String,
}

impl TelemetryLog {
    fn new(path: PathBuf) -> Self {
        TelemetryLog {
            path,
            lines: String::from("step\tlr\tloss\taux_loss\tH_utilization\tH_sparsity\n"),
        }
    }

    fn push(&mut self, step: usize, lr: f64, loss: f64, aux: f64, hu: f64, hs: f64) {
        self.lines.push_str(&format!(
            "{step}\t{lr:e}\t{loss:.8}\t{aux:.8}\t{hu:.6}\t{hs:.6}\n"
        ));
    }

    fn flush(&self) -> Result<()> {
        atomic_write(&self.path, self.lines.as_bytes())
    }
}

fn rotate_checkpoints(saved: &mut Vec<PathBuf>, keep: usize) -> Result<()> {
    while saved.len() > keep {
        let old = saved.remove(0);
        if old.exists() {
            std::fs::remove_file(&old)?;
        }
    }
    Ok(())
}

/// Pretraining: next-token cross-entropy plus the weighted balance penalty
/// over a token corpus, with mid-epoch and end-of-epoch checkpointing.
///
/// The corpus is cut into non-overlapping windows of `seq_len + 1` tokens
/// (input plus shifted target); windows are reshuffled every epoch with the
/// run seed, so a rerun with identical inputs is bit-identical.
pub fn train_loop(
    model: &mut MoeLm,
    corpus: &[u32],
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let window = cfg.seq_len + 1;
    if cfg.seq_len > model.config.context_len {
        return Err(Error::config(format!(
            "seq_len {} exceeds model context_len {}",
            cfg.seq_len, model.config.context_len
        )));
    }
    let windows: Vec<&[u32]> = corpus.chunks_exact(window).collect();
    if windows.len() < cfg.batch_size {
        return Err(Error::input(format!(
            "corpus yields {} windows of {} tokens, need at least batch_size {}",
            windows.len(),
            window,
            cfg.batch_size
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let batches_per_epoch = windows.len() / cfg.batch_size;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut batch_in_epoch = batches_per_epoch; // trigger a shuffle on step 0

    let mut optimizer = AdamW::new(cfg.adamw, &model.params)?;
    let mut telemetry = TelemetryLog::new(out_dir.join("telemetry.tsv"));
    let mut saved: Vec<PathBuf> = Vec::new();
    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;

    let moe_layers: Vec<usize> = (1..model.config.n_layers).collect();

    for step in 0..cfg.total_steps {
        if batch_in_epoch == batches_per_epoch {
            order.shuffle(&mut rng);
            batch_in_epoch = 0;
        }
        let lr = cfg.lr_for_step(step)?;

        let mut g = Graph::new();
        let staged = model.stage(&mut g, true)?;
        let mut combined = None;
        let mut ce_sum = 0.0;
        let mut aux_sum = 0.0;
        let mut all_records = Vec::new();
        for b in 0..cfg.batch_size {
            let w = windows[order[batch_in_epoch * cfg.batch_size + b]];
            let input = &w[..cfg.seq_len];
            let targets: Vec<usize> = w[1..].iter().map(|&t| t as usize).collect();
            let fwd = model.forward_staged(&mut g, &staged, input, None)?;
            let ce = sft_loss(&mut g, fwd.logits, &targets, &vec![true; cfg.seq_len])?;
            let aux = load_balancing_loss_tape(&mut g, &fwd.affinities, &fwd.records)?;
            ce_sum += g.item(ce)?;
            aux_sum += g.item(aux)?;
            let aux_scaled = g.scale(aux, cfg.aux_loss_weight);
            let seq_total = g.add(ce, aux_scaled)?;
            combined = Some(match combined {
                None => seq_total,
                Some(acc) => g.add(acc, seq_total)?,
            });
            all_records.extend(fwd.records);
        }
        let total = g.scale(combined.unwrap(), 1.0 / cfg.batch_size as f64);
        let loss = ce_sum / cfg.batch_size as f64;
        let aux = aux_sum / cfg.batch_size as f64;

        let mut hu_sum = 0.0;
        let mut hs_sum = 0.0;
        for &layer in &moe_layers {
            hu_sum += h_utilization(&all_records, layer)?;
            hs_sum += h_sparsity(&all_records, layer)?;
        }
        let hu = hu_sum / moe_layers.len() as f64;
        let hs = hs_sum / moe_layers.len() as f64;

        let total_val = g.item(total)?;
        if !total_val.is_finite() {
            telemetry.flush()?;
            return Err(Error::numerical(format!(
                "non-finite loss {total_val} at step {step} (lr {lr:e}, \
                 mean H_utilization {hu:.4}, mean H_sparsity {hs:.4})"
            )));
        }
        if step == 0 {
            first_loss = loss;
        }
        last_loss = loss;

        g.backward(total)?;
        let grads: Vec<&[f64]> = staged
            .ids
            .iter()
            .map(|&id| {
                g.grad(id)
                    .ok_or_else(|| Error::contract("missing gradient on staged leaf".to_string()))
            })
            .collect::<Result<_>>()?;
        optimizer.step(&mut model.params, &grads, lr)?;

        telemetry.push(step, lr, loss, aux, hu, hs);

        batch_in_epoch += 1;
        let mid = batches_per_epoch >= 2 && batch_in_epoch == batches_per_epoch / 2;
        let end = batch_in_epoch == batches_per_epoch;
        if mid || end {
            let path = out_dir.join(format!("step-{:06}.ckpt", step + 1));
            model.save(&path)?;
            saved.push(path);
            rotate_checkpoints(&mut saved, cfg.keep_checkpoints)?;
        }
    }

    let final_checkpoint = out_dir.join("final.ckpt");
    model.save(&final_checkpoint)?;
    telemetry.flush()?;
    Ok(TrainOutcome {
        steps: cfg.total_steps,
        first_loss,
        final_loss: last_loss,
        final_checkpoint,
        telemetry_path: telemetry.path.clone(),
    })
}

/// Preference tuning against a frozen reference copy of the starting
/// model. Pairs hold token ids; per-token log-probabilities are computed
/// here, the reference ones once up front.
pub fn dpo_loop(
    model: &mut MoeLm,
    pairs: &[(Vec<u32>, Vec<u32>, Vec<u32>)],
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::input("no preference pairs".to_string()));
    }
    for (prompt, chosen, rejected) in pairs {
        if prompt.is_empty() || chosen.is_empty() || rejected.is_empty() {
            return Err(Error::input(
                "preference pairs need non-empty prompt, chosen, and rejected".to_string(),
            ));
        }
        for (what, completion) in [("chosen", chosen), ("rejected", rejected)] {
            if prompt.len() + completion.len() > model.config.context_len {
                return Err(Error::input(format!(
                    "prompt plus {what} completion is {} tokens, context_len is {}",
                    prompt.len() + completion.len(),
                    model.config.context_len
                )));
            }
        }
    }
    if pairs.len() < cfg.batch_size {
        return Err(Error::input(format!(
            "{} preference pairs, need at least batch_size {}",
            pairs.len(),
            cfg.batch_size
        )));
    }
    std::fs::create_dir_all(out_dir)?;

    // Reference log-ratios come from the unmodified starting weights.
    let reference = MoeLm {
        config: model.config.clone(),
        params: model.params.clone(),
    };
    let mut ref_sums = Vec::with_capacity(pairs.len());
    for (prompt, chosen, rejected) in pairs {
        ref_sums.push((
            sequence_logprob_plain(&reference, prompt, chosen)?,
            sequence_logprob_plain(&reference, prompt, rejected)?,
        ));
    }

    let batches_per_epoch = pairs.len() / cfg.batch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut batch_in_epoch = batches_per_epoch;

    let mut optimizer = AdamW::new(cfg.adamw, &model.params)?;
    let mut telemetry = TelemetryLog::new(out_dir.join("telemetry.tsv"));
    let mut saved: Vec<PathBuf> = Vec::new();
    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;
    let moe_layers: Vec<usize> = (1..model.config.n_layers).collect();

    for step in 0..cfg.total_steps {
        if batch_in_epoch == batches_per_epoch {
            order.shuffle(&mut rng);
            batch_in_epoch = 0;
        }
        let lr = cfg.lr_for_step(step)?;

        let mut g = Graph::new();
        let staged = model.stage(&mut g, true)?;
        let mut rw_nodes = Vec::with_capacity(cfg.batch_size);
        let mut rl_nodes = Vec::with_capacity(cfg.batch_size);
        let mut all_records = Vec::new();
        for b in 0..cfg.batch_size {
            let idx = order[batch_in_epoch * cfg.batch_size + b];
            let (prompt, chosen, rejected) = &pairs[idx];
            let (ref_w, ref_l) = ref_sums[idx];
            let (lp_w, recs) = sequence_logprob_tape(model, &mut g, &staged, prompt, chosen)?;
            all_records.extend(recs);
            let (lp_l, _) = sequence_logprob_tape(model, &mut g, &staged, prompt, rejected)?;
            rw_nodes.push(g.add_scalar(lp_w, -ref_w));
            rl_nodes.push(g.add_scalar(lp_l, -ref_l));
        }
        let loss_node = dpo_loss_tape(&mut g, &rw_nodes, &rl_nodes, &cfg.dpo)?;
        let loss = g.item(loss_node)?;

        let mut hu_sum = 0.0;
        let mut hs_sum = 0.0;
        for &layer in &moe_layers {
            hu_sum += h_utilization(&all_records, layer)?;
            hs_sum += h_sparsity(&all_records, layer)?;
        }
        let hu = hu_sum / moe_layers.len() as f64;
        let hs = hs_sum / moe_layers.len() as f64;

        if !loss.is_finite() {
            telemetry.flush()?;
            return Err(Error::numerical(format!(
                "non-finite preference loss {loss} at step {step} (lr {lr:e}, \
                 mean H_utilization {hu:.4}, mean H_sparsity {hs:.4})"
            )));
        }
        if step == 0 {
            first_loss = loss;
        }
        last_loss = loss;

        g.backward(loss_node)?;
        let grads: Vec<&[f64]> = staged
            .ids
            .iter()
            .map(|&id| {
                g.grad(id)
                    .ok_or_else(|| Error::contract("missing gradient on staged leaf".to_string()))
            })
            .collect::<Result<_>>()?;
        optimizer.step(&mut model.params, &grads, lr)?;
        telemetry.push(step, lr, loss, 0.0, hu, hs);

        batch_in_epoch += 1;
        let mid = batches_per_epoch >= 2 && batch_in_epoch == batches_per_epoch / 2;
        let end = batch_in_epoch == batches_per_epoch;
        if mid || end {
            let path = out_dir.join(format!("step-{:06}.ckpt", step + 1));
            model.save(&path)?;
            saved.push(path);
            rotate_checkpoints(&mut saved, cfg.keep_checkpoints)?;
        }
    }

    let final_checkpoint = out_dir.join("final.ckpt");
    model.save(&final_checkpoint)?;
    telemetry.flush()?;
    Ok(TrainOutcome {
        steps: cfg.total_steps,
        first_loss,
        final_loss: last_loss,
        final_checkpoint,
        telemetry_path: telemetry.path.clone(),
    })
}

/// Builds a [`PreferencePair`] with per-token log-probs from the current
/// model (as policy) and a reference model, for scoring outside training.
pub fn score_pair(
    policy: &MoeLm,
    reference: &MoeLm,
    prompt: &[u32],
    chosen: &[u32],
    rejected: &[u32],
) -> Result<PreferencePair> {
    Ok(PreferencePair {
        prompt: prompt.to_vec(),
        chosen: chosen.to_vec(),
        rejected: rejected.to_vec(),
        policy_chosen_logps: per_token_logprobs_plain(policy, prompt, chosen)?,
        policy_rejected_logps: per_token_logprobs_plain(policy, prompt, rejected)?,
        reference_chosen_logps: per_token_logprobs_plain(reference, prompt, chosen)?,
        reference_rejected_logps: per_token_logprobs_plain(reference, prompt, rejected)?,
    })
}

fn per_token_logprobs_plain(model: &MoeLm, prompt: &[u32], completion: &[u32]) -> Result<Vec<f64>> {
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(completion);
    let out = model.forward(&seq, None)?;
    let mut lps = Vec::with_capacity(completion.len());
    for (i, &tok) in completion.iter().enumerate() {
        let row = out.logits_at(prompt.len() + i - 1);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        lps.push(row[tok as usize] - m - z.ln());
    }
    Ok(lps)
}

fn sequence_logprob_plain(model: &MoeLm, prompt: &[u32], completion: &[u32]) -> Result<f64> {
    Ok(per_token_logprobs_plain(model, prompt, completion)?
        .iter()
        .sum())
}

/// Tape version: returns a scalar node holding the completion's summed
/// log-probability, plus the routing records of the forward pass.
fn sequence_logprob_tape(
    model: &MoeLm,
    g: &mut Graph,
    staged: &crate::model::Staged,
    prompt: &[u32],
    completion: &[u32],
) -> Result<(crate::tensor::TensorId, Vec<crate::model::LayerActivationRecord>)> {
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(completion);
    let fwd = model.forward_staged(g, staged, &seq, None)?;
    let lsm = g.log_softmax(fwd.logits, 1)?;
    // Row p-1 predicts the first completion token.
    let rows: Vec<usize> = (0..completion.len()).map(|i| prompt.len() + i - 1).collect();
    let picked_rows = g.gather_rows(lsm, &rows)?;
    let cols: Vec<usize> = completion.iter().map(|&t| t as usize).collect();
    let lps = g.pick_per_row(picked_rows, &cols)?;
    Ok((g.sum(lps), fwd.records))
}
