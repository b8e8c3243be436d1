//! Preference-pair types and the weighted DPO loss with its trailing
//! chosen-sequence log-ratio term.

use crate::error::{Error, Result};
use crate::tensor::{Graph, TensorId};

/// One preference example: a shared prompt plus chosen and rejected
/// completions, with per-completion-token log-probabilities under the policy
/// and the frozen reference model.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair {
    pub prompt: Vec<u32>,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
    pub policy_chosen_logps: Vec<f64>,
    pub policy_rejected_logps: Vec<f64>,
    pub reference_chosen_logps: Vec<f64>,
    pub reference_rejected_logps: Vec<f64>,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<()> {
        if self.chosen.is_empty() || self.rejected.is_empty() {
            return Err(Error::input(
                "preference pair needs non-empty chosen and rejected completions".to_string(),
            ));
        }
        let lens = [
            ("policy chosen", self.policy_chosen_logps.len(), self.chosen.len()),
            ("reference chosen", self.reference_chosen_logps.len(), self.chosen.len()),
            ("policy rejected", self.policy_rejected_logps.len(), self.rejected.len()),
            ("reference rejected", self.reference_rejected_logps.len(), self.rejected.len()),
        ];
        for (what, got, want) in lens {
            if got != want {
                return Err(Error::input(format!(
                    "{what} log-probs have length {got}, completion has {want} tokens"
                )));
            }
        }
        for lp in self
            .policy_chosen_logps
            .iter()
            .chain(&self.policy_rejected_logps)
            .chain(&self.reference_chosen_logps)
            .chain(&self.reference_rejected_logps)
        {
            if !(lp.is_finite() && *lp <= 0.0) {
                return Err(Error::input(format!(
                    "log-probabilities must be finite and <= 0, got {lp}"
                )));
            }
        }
        Ok(())
    }

    /// Chosen-sequence log-ratio: sum of policy log-probs minus sum of
    /// reference log-probs over completion tokens.
    pub fn ratio_chosen(&self) -> f64 {
        sum(&self.policy_chosen_logps) - sum(&self.reference_chosen_logps)
    }

    pub fn ratio_rejected(&self) -> f64 {
        sum(&self.policy_rejected_logps) - sum(&self.reference_rejected_logps)
    }
}

fn sum(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |a, b| a + b)
}

/// Weights for the preference loss. `beta_w` scales the chosen log-ratio and
/// `beta_l` the rejected one inside the sigmoid. The trailing chosen
/// log-ratio term is added with `nll_term_coefficient`; its typeset sign is
/// positive, and `negate_nll_term` flips it for the reading where the term
/// is a negative log-likelihood penalty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpoConfig {
    pub beta_w: f64,
    pub beta_l: f64,
    pub nll_term_coefficient: f64,
    pub negate_nll_term: bool,
}

impl DpoConfig {
    pub fn new(beta_w: f64, beta_l: f64) -> Self {
        DpoConfig {
            beta_w,
            beta_l,
            nll_term_coefficient: 1.0,
            negate_nll_term: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_w > 0.0 && self.beta_w.is_finite()) {
            return Err(Error::config(format!("beta_w must be positive, got {}", self.beta_w)));
        }
        if !(self.beta_l > 0.0 && self.beta_l.is_finite()) {
            return Err(Error::config(format!("beta_l must be positive, got {}", self.beta_l)));
        }
        if !self.nll_term_coefficient.is_finite() {
            return Err(Error::config(format!(
                "nll_term_coefficient must be finite, got {}",
                self.nll_term_coefficient
            )));
        }
        Ok(())
    }

    fn trailing_coefficient(&self) -> f64 {
        if self.negate_nll_term {
            -self.nll_term_coefficient
        } else {
            self.nll_term_coefficient
        }
    }
}

/// `-log sigmoid(z)` evaluated as a stable softplus of `-z`.
fn neg_log_sigmoid(z: f64) -> f64 {
    (-z).max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Batch preference loss: mean over pairs of
/// `-log sigmoid(beta_w r_w - beta_l r_l) + c r_w`, where `r_w`/`r_l` are
/// the chosen/rejected completion log-ratios against the reference model.
pub fn dpo_loss(pairs: &[PreferencePair], config: &DpoConfig) -> Result<f64> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::input("empty preference batch".to_string()));
    }
    let c = config.trailing_coefficient();
    let mut total = 0.0;
    for pair in pairs {
        pair.validate()?;
        let r_w = pair.ratio_chosen();
        let r_l = pair.ratio_rejected();
        let z = config.beta_w * r_w - config.beta_l * r_l;
        total += neg_log_sigmoid(z) + c * r_w;
    }
    Ok(total / pairs.len() as f64)
}

/// Tape form of the loss over per-pair log-ratio nodes, for training and
/// gradient checking. `ratios_chosen[i]` and `ratios_rejected[i]` must be
/// scalar nodes holding r_w and r_l for pair `i`.
pub fn dpo_loss_tape(
    g: &mut Graph,
    ratios_chosen: &[TensorId],
    ratios_rejected: &[TensorId],
    config: &DpoConfig,
) -> Result<TensorId> {
    config.validate()?;
    if ratios_chosen.is_empty() || ratios_chosen.len() != ratios_rejected.len() {
        return Err(Error::input(format!(
            "need matching non-empty ratio lists, got {} chosen and {} rejected",
            ratios_chosen.len(),
            ratios_rejected.len()
        )));
    }
    let c = config.trailing_coefficient();
    let mut per_pair = Vec::with_capacity(ratios_chosen.len());
    for (&rw, &rl) in ratios_chosen.iter().zip(ratios_rejected) {
        let zw = g.scale(rw, config.beta_w);
        let zl = g.scale(rl, config.beta_l);
        let z = g.sub(zw, zl)?;
        let neg_z = g.neg(z);
        let sig_term = g.softplus(neg_z);
        let trailing = g.scale(rw, c);
        per_pair.push(g.add(sig_term, trailing)?);
    }
    let mut acc = per_pair[0];
    for &t in &per_pair[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / ratios_chosen.len() as f64))
}
