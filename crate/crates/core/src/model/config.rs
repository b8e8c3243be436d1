//! Model hyperparameters, validation, serialization, and parameter counting.

use crate::error::{Error, Result};
use crate::kvtext::KvReader;

/// How router affinities become combination gates for the selected experts.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum GateMode {
    /// Gate = sigmoid of the raw affinity. Gates are independent per expert
    /// and deliberately do not sum to one.
    SigmoidUnnormalized,
    /// Gate = full-softmax probability of the selected expert, kept as-is.
    SoftmaxTopKUnnormalized,
    /// Gate = full-softmax probability rescaled so the selected gates sum
    /// to one per token.
    SoftmaxRenormalized,
}

impl GateMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GateMode::SigmoidUnnormalized => "sigmoid-unnormalized",
            GateMode::SoftmaxTopKUnnormalized => "softmax-topk-unnormalized",
            GateMode::SoftmaxRenormalized => "softmax-renormalized",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sigmoid-unnormalized" => Ok(GateMode::SigmoidUnnormalized),
            "softmax-topk-unnormalized" => Ok(GateMode::SoftmaxTopKUnnormalized),
            "softmax-renormalized" => Ok(GateMode::SoftmaxRenormalized),
            _ => Err(Error::config(format!("unknown gate_mode {s:?}"))),
        }
    }
}

/// Architecture of the MoE language model. The first transformer layer uses
/// a dense gated MLP; every later layer carries shared experts (always
/// active) plus routed experts gated top-k per token.
#[derive(Clone, PartialEq, Debug)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Key/value head count for grouped-query attention; divides `n_heads`.
    pub n_kv_heads: usize,
    pub n_shared_experts: usize,
    pub n_routed_experts: usize,
    /// Routed experts activated per token.
    pub top_k: usize,
    /// Hidden width of each expert MLP.
    pub d_ff_expert: usize,
    /// Hidden width of the first layer's dense gated MLP.
    pub d_ff_first: usize,
    pub rope_base: f64,
    pub context_len: usize,
    /// When set, all MoE layers share one set of expert weights (routers
    /// stay per-layer).
    pub tie_experts_across_layers: bool,
    pub gate_mode: GateMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk_default()
    }
}

impl ModelConfig {
    /// The reference desk-scale configuration.
    pub fn desk_default() -> Self {
        ModelConfig {
            vocab_size: 4096,
            d_model: 256,
            n_layers: 6,
            n_heads: 8,
            n_kv_heads: 4,
            n_shared_experts: 2,
            n_routed_experts: 8,
            top_k: 2,
            d_ff_expert: 448,
            d_ff_first: 896,
            rope_base: 10_000.0,
            context_len: 1024,
            tie_experts_across_layers: false,
            gate_mode: GateMode::SigmoidUnnormalized,
        }
    }

    /// Small variant used by tests and smoke training: same layer layout,
    /// narrow widths, so CPU runs stay fast.
    pub fn desk_small() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 64,
            n_layers: 6,
            n_heads: 4,
            n_kv_heads: 2,
            n_shared_experts: 2,
            n_routed_experts: 8,
            top_k: 2,
            d_ff_expert: 112,
            d_ff_first: 224,
            rope_base: 10_000.0,
            context_len: 256,
            tie_experts_across_layers: false,
            gate_mode: GateMode::SigmoidUnnormalized,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Transformer layers that carry an MoE block (all but the first).
    pub fn n_moe_layers(&self) -> usize {
        self.n_layers.saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if self.d_model == 0 || self.n_layers == 0 || self.context_len == 0 {
            return fail("d_model, n_layers and context_len must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "n_heads {} must be positive and divide d_model {}",
                self.n_heads, self.d_model
            ));
        }
        if self.n_kv_heads == 0 || self.n_heads % self.n_kv_heads != 0 {
            return fail(format!(
                "n_kv_heads {} must be positive and divide n_heads {}",
                self.n_kv_heads, self.n_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!(
                "head dim {} must be even for rotary embeddings",
                self.head_dim()
            ));
        }
        if self.n_layers > 1 {
            if self.n_routed_experts == 0 {
                return fail("n_routed_experts must be positive".into());
            }
            if self.top_k == 0 || self.top_k > self.n_routed_experts {
                return fail(format!(
                    "top_k {} must be in 1..={}",
                    self.top_k, self.n_routed_experts
                ));
            }
            if self.d_ff_expert == 0 {
                return fail("d_ff_expert must be positive".into());
            }
        }
        if self.d_ff_first == 0 {
            return fail("d_ff_first must be positive".into());
        }
        if !(self.rope_base > 0.0) || !self.rope_base.is_finite() {
            return fail(format!("rope_base must be positive, got {}", self.rope_base));
        }
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut r = KvReader::from_text(text)?;
        let cfg = Self::from_reader(&mut r)?;
        r.finish()?;
        Ok(cfg)
    }

    /// Reads fields from an open reader; missing keys fall back to the desk
    /// default. Callers own `finish()` so they can layer more fields.
    pub fn from_reader(r: &mut KvReader) -> Result<Self> {
        let d = ModelConfig::desk_default();
        let cfg = ModelConfig {
            vocab_size: r.take_usize("vocab_size", d.vocab_size)?,
            d_model: r.take_usize("d_model", d.d_model)?,
            n_layers: r.take_usize("n_layers", d.n_layers)?,
            n_heads: r.take_usize("n_heads", d.n_heads)?,
            n_kv_heads: r.take_usize("n_kv_heads", d.n_kv_heads)?,
            n_shared_experts: r.take_usize("n_shared_experts", d.n_shared_experts)?,
            n_routed_experts: r.take_usize("n_routed_experts", d.n_routed_experts)?,
            top_k: r.take_usize("top_k", d.top_k)?,
            d_ff_expert: r.take_usize("d_ff_expert", d.d_ff_expert)?,
            d_ff_first: r.take_usize("d_ff_first", d.d_ff_first)?,
            rope_base: r.take_f64("rope_base", d.rope_base)?,
            context_len: r.take_usize("context_len", d.context_len)?,
            tie_experts_across_layers: r
                .take_bool("tie_experts_across_layers", d.tie_experts_across_layers)?,
            gate_mode: GateMode::parse(&r.take_string("gate_mode", d.gate_mode.as_str()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv_text(&self) -> String {
        format!(
            "vocab_size={}\nd_model={}\nn_layers={}\nn_heads={}\nn_kv_heads={}\n\
             n_shared_experts={}\nn_routed_experts={}\ntop_k={}\nd_ff_expert={}\n\
             d_ff_first={}\nrope_base={}\ncontext_len={}\ntie_experts_across_layers={}\n\
             gate_mode={}\n",
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.n_kv_heads,
            self.n_shared_experts,
            self.n_routed_experts,
            self.top_k,
            self.d_ff_expert,
            self.d_ff_first,
            self.rope_base,
            self.context_len,
            self.tie_experts_across_layers,
            self.gate_mode.as_str(),
        )
    }

    /// Total stored parameters, in closed form. Matches the registry by
    /// construction order: embedding, per-layer attention + norms, first
    /// layer dense MLP, per-layer routers, expert weights (once if tied),
    /// final norm, output head.
    pub fn count_params(&self) -> usize {
        let d = self.d_model;
        let hd = self.head_dim();
        let attn = d * (self.n_heads * hd)       // wq
            + 2 * d * (self.n_kv_heads * hd)     // wk, wv
            + (self.n_heads * hd) * d; // wo
        let norms_per_layer = 2 * d;
        let mlp = |ff: usize| 3 * d * ff;

        let mut total = self.vocab_size * d; // embedding
        total += self.n_layers * (attn + norms_per_layer);
        total += mlp(self.d_ff_first);
        let moe_layers = self.n_moe_layers();
        if moe_layers > 0 {
            total += moe_layers * d * self.n_routed_experts; // routers
            let expert_sets = if self.tie_experts_across_layers { 1 } else { moe_layers };
            total += expert_sets
                * (self.n_shared_experts + self.n_routed_experts)
                * mlp(self.d_ff_expert);
        }
        total += d; // final norm
        total += d * self.vocab_size; // output head
        total
    }

    /// Per-token compute footprint: embedding row, all attention and dense
    /// blocks, routers, shared experts, and only the `top_k` routed experts
    /// per MoE layer. Tied expert weights count once per layer that applies
    /// them, so this measures work, not unique storage.
    pub fn count_active_params(&self) -> usize {
        let d = self.d_model;
        let hd = self.head_dim();
        let attn = d * (self.n_heads * hd) + 2 * d * (self.n_kv_heads * hd) + (self.n_heads * hd) * d;
        let mlp = |ff: usize| 3 * d * ff;

        let mut total = d; // one embedding row
        total += self.n_layers * (attn + 2 * d);
        total += mlp(self.d_ff_first);
        total += self.n_moe_layers()
            * (d * self.n_routed_experts
                + (self.n_shared_experts + self.top_k) * mlp(self.d_ff_expert));
        total += d;
        total += d * self.vocab_size;
        total
    }
}

/// RoPE base for a target context window, per the adjusted-base-frequency
/// extension schedule. Only the three standard stages are supported; pass
/// `rope_base` directly in the config for anything else.
pub fn abf_base_for_context(target_context: usize) -> Result<f64> {
    match target_context {
        8192 => Ok(10_000.0),
        32768 => Ok(300_000.0),
        131072 => Ok(1_400_000.0),
        other => Err(Error::config(format!(
            "no ABF base scheduled for context length {other}; known stages are 8192, 32768, 131072"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_is_valid() {
        ModelConfig::desk_default().validate().unwrap();
        ModelConfig::desk_small().validate().unwrap();
    }

    #[test]
    fn kv_text_roundtrip() {
        let mut cfg = ModelConfig::desk_default();
        cfg.tie_experts_across_layers = true;
        cfg.gate_mode = GateMode::SoftmaxRenormalized;
        cfg.rope_base = 300_000.0;
        let text = cfg.to_kv_text();
        let back = ModelConfig::from_kv_text(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_is_config_error() {
        let err = ModelConfig::from_kv_text("d_model=64\nnot_a_key=1\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("not_a_key"));
    }

    #[test]
    fn missing_keys_fall_back_to_desk_default() {
        let cfg = ModelConfig::from_kv_text("d_model=128\nn_heads=4\nn_kv_heads=2\n").unwrap();
        assert_eq!(cfg.d_model, 128);
        assert_eq!(cfg.vocab_size, ModelConfig::desk_default().vocab_size);
    }

    #[test]
    fn top_k_cannot_exceed_routed_experts() {
        let mut cfg = ModelConfig::desk_default();
        cfg.top_k = 9;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn kv_head_divisibility_is_enforced() {
        let mut cfg = ModelConfig::desk_default();
        cfg.n_kv_heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn gate_mode_strings_roundtrip() {
        for mode in [
            GateMode::SigmoidUnnormalized,
            GateMode::SoftmaxTopKUnnormalized,
            GateMode::SoftmaxRenormalized,
        ] {
            assert_eq!(GateMode::parse(mode.as_str()).unwrap(), mode);
        }
        assert!(GateMode::parse("other").is_err());
    }

    #[test]
    fn count_params_closed_form_examples() {
        // Hand-computed for a tiny config.
        let cfg = ModelConfig {
            vocab_size: 10,
            d_model: 8,
            n_layers: 3,
            n_heads: 2,
            n_kv_heads: 1,
            n_shared_experts: 1,
            n_routed_experts: 4,
            top_k: 2,
            d_ff_expert: 6,
            d_ff_first: 12,
            rope_base: 10_000.0,
            context_len: 32,
            tie_experts_across_layers: false,
            gate_mode: GateMode::SigmoidUnnormalized,
        };
        cfg.validate().unwrap();
        // embed 80, attn per layer: 8*8 + 2*8*4 + 8*8 = 192, norms 16,
        // 3 layers -> 624, first mlp 3*8*12 = 288, routers 2*32 = 64,
        // experts 2 layers * 5 * 3*8*6 = 1440, final norm 8, head 80.
        assert_eq!(cfg.count_params(), 80 + 624 + 288 + 64 + 1440 + 8 + 80);

        let mut tied = cfg.clone();
        tied.tie_experts_across_layers = true;
        assert_eq!(tied.count_params(), 80 + 624 + 288 + 64 + 720 + 8 + 80);
    }

    #[test]
    fn active_params_measure_compute_not_storage() {
        let cfg = ModelConfig::desk_default();
        assert!(cfg.count_active_params() <= cfg.count_params());
        // Tying shrinks storage but leaves per-token compute unchanged.
        let mut tied = cfg.clone();
        tied.tie_experts_across_layers = true;
        assert_eq!(tied.count_active_params(), cfg.count_active_params());
        assert!(tied.count_params() < cfg.count_params());
    }

    #[test]
    fn abf_schedule_values() {
        assert_eq!(abf_base_for_context(8192).unwrap(), 10_000.0);
        assert_eq!(abf_base_for_context(32768).unwrap(), 300_000.0);
        assert_eq!(abf_base_for_context(131072).unwrap(), 1_400_000.0);
        assert!(abf_base_for_context(65536).is_err());
    }
}
