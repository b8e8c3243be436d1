//! The MoE transformer: embedding, grouped-query attention with rotary
//! position embeddings, a dense gated MLP in the first layer, and
//! shared-plus-routed expert blocks in every later layer.

use crate::error::{Error, Result};
use crate::model::config::{GateMode, ModelConfig};
use crate::model::params::{expert_prefix, ParamRegistry};
use crate::model::router::{
    affinity_distribution, gates_for, select_top_k, LayerActivationRecord,
};
use crate::tensor::{Graph, TensorId};

/// Epsilon inside the RMS normalizer.
pub const RMS_EPS: f64 = 1e-6;

pub fn attn_scale(head_dim: usize) -> f64 {
    1.0 / (head_dim as f64).sqrt()
}

/// Lower-triangular additive mask: 0 on and below the diagonal, -inf above.
pub fn causal_mask(t: usize) -> Vec<f64> {
    let mut mask = vec![0.0; t * t];
    for row in 0..t {
        for col in row + 1..t {
            mask[row * t + col] = f64::NEG_INFINITY;
        }
    }
    mask
}

/// Per-MoE-layer additive router biases. `biases[l]` applies to transformer
/// layer `l + 1` (layer 0 is dense) and has one entry per routed expert.
#[derive(Clone, Debug)]
pub struct SteeringPlan {
    pub biases: Vec<Vec<f64>>,
}

impl SteeringPlan {
    /// Bias for an absolute transformer layer, if any is set. All-zero
    /// biases are dropped so a zero plan is bitwise identical to no plan.
    pub(crate) fn for_layer(&self, layer: usize) -> Option<&[f64]> {
        let bias = self.biases.get(layer.checked_sub(1)?)?;
        if bias.iter().all(|&b| b == 0.0) {
            None
        } else {
            Some(bias)
        }
    }

    pub(crate) fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.biases.len() != config.n_moe_layers() {
            return Err(Error::config(format!(
                "steering plan has {} layers, model has {} MoE layers",
                self.biases.len(),
                config.n_moe_layers()
            )));
        }
        for (l, bias) in self.biases.iter().enumerate() {
            if bias.len() != config.n_routed_experts {
                return Err(Error::config(format!(
                    "steering bias for MoE layer {l} has {} entries, expected {}",
                    bias.len(),
                    config.n_routed_experts
                )));
            }
            if bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::numerical(format!(
                    "steering bias for MoE layer {l} contains a non-finite value"
                )));
            }
        }
        Ok(())
    }
}

/// Parameter leaves staged into a graph, aligned with registry order.
pub struct Staged {
    pub ids: Vec<TensorId>,
}

/// Result of a tape forward pass.
#[derive(Debug)]
pub struct TapeForward {
    /// `[T, vocab]` logits node.
    pub logits: TensorId,
    /// One record per MoE layer, in layer order.
    pub records: Vec<LayerActivationRecord>,
    /// Router affinity nodes (`[T, n_routed]`, steering included) per MoE
    /// layer; the load-balancing loss differentiates through these.
    pub affinities: Vec<TensorId>,
}

#[derive(Debug)]
pub struct MoeLm {
    pub config: ModelConfig,
    pub params: ParamRegistry,
}

impl MoeLm {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ParamRegistry::init(&config, seed)?;
        Ok(MoeLm { config, params })
    }

    pub fn count_params(&self) -> usize {
        self.params.total_values()
    }

    /// Copies every parameter into the graph as a leaf. With `trainable`
    /// set, gradients accumulate on these leaves during backward.
    pub fn stage(&self, g: &mut Graph, trainable: bool) -> Result<Staged> {
        let ids = self
            .params
            .iter()
            .map(|p| g.leaf(p.data.clone(), &p.shape, trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(Staged { ids })
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::input("empty token sequence".to_string()));
        }
        if tokens.len() > self.config.context_len {
            return Err(Error::input(format!(
                "sequence length {} exceeds context_len {}",
                tokens.len(),
                self.config.context_len
            )));
        }
        for (pos, &t) in tokens.iter().enumerate() {
            if t as usize >= self.config.vocab_size {
                return Err(Error::input(format!(
                    "token id {} at position {} is out of vocabulary (size {})",
                    t, pos, self.config.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Full forward pass on the tape. One call per sequence; batching is a
    /// caller loop over sequences sharing the same staged parameters.
    pub fn forward_staged(
        &self,
        g: &mut Graph,
        staged: &Staged,
        tokens: &[u32],
        steering: Option<&SteeringPlan>,
    ) -> Result<TapeForward> {
        self.check_tokens(tokens)?;
        if let Some(plan) = steering {
            plan.validate(&self.config)?;
        }
        let cfg = &self.config;
        let t_len = tokens.len();
        let positions: Vec<usize> = (0..t_len).collect();
        let token_rows: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();

        let p = |name: &str| -> Result<TensorId> { Ok(staged.ids[self.params.id(name)?]) };

        let embed = p("embed.weight")?;
        let mut x = g.gather_rows(embed, &token_rows)?;
        let mask = g.constant(causal_mask(t_len), &[t_len, t_len])?;

        let mut records = Vec::new();
        let mut affinities = Vec::new();

        for layer in 0..cfg.n_layers {
            let attn_norm = p(&format!("layers.{layer}.attn_norm.weight"))?;
            let xn = rmsnorm(g, x, attn_norm, cfg.d_model)?;
            let attn_out = self.attention(g, staged, layer, xn, &positions, mask)?;
            x = g.add(x, attn_out)?;

            let ffn_norm = p(&format!("layers.{layer}.ffn_norm.weight"))?;
            let xn = rmsnorm(g, x, ffn_norm, cfg.d_model)?;
            let ffn_out = if layer == 0 {
                gated_mlp(
                    g,
                    xn,
                    p("layers.0.mlp.gate.weight")?,
                    p("layers.0.mlp.up.weight")?,
                    p("layers.0.mlp.down.weight")?,
                )?
            } else {
                let bias = steering.and_then(|plan| plan.for_layer(layer));
                let (out, record, aff) = self.moe_block(g, staged, layer, xn, bias)?;
                records.push(record);
                affinities.push(aff);
                out
            };
            x = g.add(x, ffn_out)?;
        }

        let final_norm = p("final_norm.weight")?;
        let xn = rmsnorm(g, x, final_norm, cfg.d_model)?;
        let logits = g.matmul(xn, p("lm_head.weight")?)?;

        Ok(TapeForward {
            logits,
            records,
            affinities,
        })
    }

    /// One attention block on already-normed input. Public so single
    /// blocks can be exercised and gradient-checked in isolation.
    pub fn attention(
        &self,
        g: &mut Graph,
        staged: &Staged,
        layer: usize,
        xn: TensorId,
        positions: &[usize],
        mask: TensorId,
    ) -> Result<TensorId> {
        let cfg = &self.config;
        let hd = cfg.head_dim();
        let p = |name: String| -> Result<TensorId> { Ok(staged.ids[self.params.id(&name)?]) };

        let q = g.matmul(xn, p(format!("layers.{layer}.attn.wq.weight"))?)?;
        let k = g.matmul(xn, p(format!("layers.{layer}.attn.wk.weight"))?)?;
        let v = g.matmul(xn, p(format!("layers.{layer}.attn.wv.weight"))?)?;

        let group = cfg.n_heads / cfg.n_kv_heads;
        let mut head_outputs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let kv = h / group;
            let qh = g.slice_cols(q, h * hd, (h + 1) * hd)?;
            let kh = g.slice_cols(k, kv * hd, (kv + 1) * hd)?;
            let vh = g.slice_cols(v, kv * hd, (kv + 1) * hd)?;
            let qh = g.rope(qh, positions, cfg.rope_base)?;
            let kh = g.rope(kh, positions, cfg.rope_base)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, attn_scale(hd));
            let masked = g.add(scores, mask)?;
            let probs = g.softmax(masked, 1)?;
            head_outputs.push(g.matmul(probs, vh)?);
        }
        let merged = g.concat_cols(&head_outputs)?;
        g.matmul(merged, p(format!("layers.{layer}.attn.wo.weight"))?)
    }

    /// One MoE block on already-normed input: shared experts plus gated
    /// top-k routed experts. Returns the block output, the activation
    /// record, and the affinity node. Public for the same reason as
    /// [`Self::attention`].
    pub fn moe_block(
        &self,
        g: &mut Graph,
        staged: &Staged,
        layer: usize,
        xn: TensorId,
        steering_bias: Option<&[f64]>,
    ) -> Result<(TensorId, LayerActivationRecord, TensorId)> {
        let cfg = &self.config;
        let e = cfg.n_routed_experts;
        let t_len = self.pos_len(g, xn);
        let p = |name: String| -> Result<TensorId> { Ok(staged.ids[self.params.id(&name)?]) };
        let expert_weights = |which: &str, shared: bool, idx: usize| -> Result<TensorId> {
            p(format!(
                "{}.{which}.weight",
                expert_prefix(cfg, layer, shared, idx)
            ))
        };

        let router = p(format!("layers.{layer}.moe.router.weight"))?;
        let mut aff = g.matmul(xn, router)?;
        if let Some(bias) = steering_bias {
            let b = g.constant(bias.to_vec(), &[e])?;
            aff = g.add(aff, b)?;
        }
        let aff_data = g.data(aff).to_vec();

        // Selection and per-token bookkeeping are plain f64 on affinity
        // values; gradients flow through the gate nodes built below.
        let mut selected = Vec::with_capacity(t_len);
        let mut distribution = Vec::with_capacity(t_len);
        let mut gates = Vec::with_capacity(t_len);
        let mut expert_rows: Vec<Vec<usize>> = vec![Vec::new(); e];
        for t in 0..t_len {
            let a = &aff_data[t * e..(t + 1) * e];
            let sel = select_top_k(a, cfg.top_k);
            for &j in &sel {
                expert_rows[j].push(t);
            }
            distribution.push(affinity_distribution(a));
            gates.push(gates_for(a, &sel, cfg.gate_mode));
            selected.push(sel);
        }

        let gate_source = match cfg.gate_mode {
            GateMode::SigmoidUnnormalized => g.sigmoid(aff),
            GateMode::SoftmaxTopKUnnormalized | GateMode::SoftmaxRenormalized => {
                g.softmax(aff, 1)?
            }
        };
        // Reciprocal of each token's selected-gate sum, for renormalization.
        let inv_denom = if cfg.gate_mode == GateMode::SoftmaxRenormalized {
            let mut denom: Option<TensorId> = None;
            for pos in 0..cfg.top_k {
                let cols: Vec<usize> = selected.iter().map(|s| s[pos]).collect();
                let picked = g.pick_per_row(gate_source, &cols)?;
                denom = Some(match denom {
                    None => picked,
                    Some(d) => g.add(d, picked)?,
                });
            }
            Some(g.powf(denom.expect("top_k >= 1"), -1.0))
        } else {
            None
        };

        let mut out: Option<TensorId> = None;
        let mut accumulate = |g: &mut Graph, part: TensorId| -> Result<()> {
            out = Some(match out {
                None => part,
                Some(acc) => g.add(acc, part)?,
            });
            Ok(())
        };

        for s in 0..cfg.n_shared_experts {
            let part = gated_mlp(
                g,
                xn,
                expert_weights("gate", true, s)?,
                expert_weights("up", true, s)?,
                expert_weights("down", true, s)?,
            )?;
            accumulate(g, part)?;
        }

        for j in 0..e {
            let rows = &expert_rows[j];
            if rows.is_empty() {
                continue;
            }
            let hj = g.gather_rows(xn, rows)?;
            let ej = gated_mlp(
                g,
                hj,
                expert_weights("gate", false, j)?,
                expert_weights("up", false, j)?,
                expert_weights("down", false, j)?,
            )?;
            let picked_rows = g.gather_rows(gate_source, rows)?;
            let mut gate_vec = g.pick_per_row(picked_rows, &vec![j; rows.len()])?;
            if let Some(inv) = inv_denom {
                let inv_rows = g.gather_rows(inv, rows)?;
                gate_vec = g.mul(gate_vec, inv_rows)?;
            }
            let scaled = g.scale_rows(ej, gate_vec)?;
            let placed = g.scatter_rows(scaled, rows, t_len)?;
            accumulate(g, placed)?;
        }

        let record = LayerActivationRecord {
            layer,
            n_experts: e,
            selected,
            distribution,
            gates,
        };
        let out = out.expect("top_k >= 1 guarantees at least one expert contribution");
        Ok((out, record, aff))
    }

    fn pos_len(&self, g: &Graph, x: TensorId) -> usize {
        g.shape(x)[0]
    }
}

/// `x / sqrt(mean(x^2) + eps) * w`, row-wise over `[T, d]`.
pub fn rmsnorm(g: &mut Graph, x: TensorId, w: TensorId, d: usize) -> Result<TensorId> {
    let sq = g.mul(x, x)?;
    let ms = g.sum_rows(sq)?;
    let ms = g.scale(ms, 1.0 / d as f64);
    let shifted = g.add_scalar(ms, RMS_EPS);
    let rs = g.powf(shifted, -0.5);
    let xn = g.scale_rows(x, rs)?;
    g.mul(xn, w)
}

/// `down(silu(gate(h)) * up(h))`.
pub fn gated_mlp(
    g: &mut Graph,
    h: TensorId,
    w_gate: TensorId,
    w_up: TensorId,
    w_down: TensorId,
) -> Result<TensorId> {
    let gate = g.matmul(h, w_gate)?;
    let act = g.silu(gate);
    let up = g.matmul(h, w_up)?;
    let prod = g.mul(act, up)?;
    g.matmul(prod, w_down)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 16,
            n_layers: 3,
            n_heads: 2,
            n_kv_heads: 1,
            n_shared_experts: 1,
            n_routed_experts: 4,
            top_k: 2,
            d_ff_expert: 12,
            d_ff_first: 24,
            rope_base: 10_000.0,
            context_len: 32,
            tie_experts_across_layers: false,
            gate_mode: GateMode::SigmoidUnnormalized,
        }
    }

    fn run_forward(cfg: ModelConfig, seed: u64, tokens: &[u32]) -> (Graph, TapeForward) {
        let model = MoeLm::new(cfg, seed).unwrap();
        let mut g = Graph::new();
        let staged = model.stage(&mut g, false).unwrap();
        let fwd = model.forward_staged(&mut g, &staged, tokens, None).unwrap();
        (g, fwd)
    }

    #[test]
    fn forward_produces_finite_logits_and_records() {
        let cfg = tiny();
        let tokens = [1u32, 5, 3, 7, 2];
        let (g, fwd) = run_forward(cfg.clone(), 11, &tokens);
        assert_eq!(g.shape(fwd.logits), &[5, cfg.vocab_size]);
        assert!(g.data(fwd.logits).iter().all(|v| v.is_finite()));
        assert_eq!(fwd.records.len(), 2);
        for (i, rec) in fwd.records.iter().enumerate() {
            assert_eq!(rec.layer, i + 1);
            assert_eq!(rec.n_tokens(), 5);
            for sel in &rec.selected {
                assert_eq!(sel.len(), cfg.top_k);
                assert!(sel.windows(2).all(|w| w[0] < w[1]));
            }
            for dist in &rec.distribution {
                let s: f64 = dist.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_vocab_token_is_input_error() {
        let model = MoeLm::new(tiny(), 0).unwrap();
        let mut g = Graph::new();
        let staged = model.stage(&mut g, false).unwrap();
        let err = model
            .forward_staged(&mut g, &staged, &[1, 99], None)
            .unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("position 1"), "{err}");
    }

    #[test]
    fn over_length_sequence_is_input_error() {
        let model = MoeLm::new(tiny(), 0).unwrap();
        let mut g = Graph::new();
        let staged = model.stage(&mut g, false).unwrap();
        let tokens = vec![0u32; 33];
        let err = model
            .forward_staged(&mut g, &staged, &tokens, None)
            .unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn forward_is_deterministic() {
        let tokens = [3u32, 1, 4, 1, 5, 9, 2, 6];
        let (g1, f1) = run_forward(tiny(), 5, &tokens);
        let (g2, f2) = run_forward(tiny(), 5, &tokens);
        assert_eq!(g1.data(f1.logits), g2.data(f2.logits));
        for (r1, r2) in f1.records.iter().zip(f2.records.iter()) {
            assert_eq!(r1.selected, r2.selected);
            assert_eq!(r1.gates, r2.gates);
        }
    }

    #[test]
    fn all_gate_modes_run_and_respect_their_normalization() {
        for mode in [
            GateMode::SigmoidUnnormalized,
            GateMode::SoftmaxTopKUnnormalized,
            GateMode::SoftmaxRenormalized,
        ] {
            let mut cfg = tiny();
            cfg.gate_mode = mode;
            let (_, fwd) = run_forward(cfg, 9, &[2, 8, 11]);
            for rec in &fwd.records {
                for gates in &rec.gates {
                    let total: f64 = gates.iter().sum();
                    match mode {
                        GateMode::SoftmaxRenormalized => {
                            assert!((total - 1.0).abs() < 1e-12)
                        }
                        GateMode::SoftmaxTopKUnnormalized => assert!(total < 1.0),
                        GateMode::SigmoidUnnormalized => {
                            assert!(gates.iter().all(|g| *g > 0.0 && *g < 1.0))
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn tied_experts_forward_runs() {
        let mut cfg = tiny();
        cfg.tie_experts_across_layers = true;
        let (g, fwd) = run_forward(cfg, 2, &[0, 1, 2, 3]);
        assert!(g.data(fwd.logits).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_steering_plan_is_bitwise_identical_to_none() {
        let cfg = tiny();
        let model = MoeLm::new(cfg.clone(), 21).unwrap();
        let tokens = [4u32, 9, 14, 0, 7];

        let mut g1 = Graph::new();
        let staged1 = model.stage(&mut g1, false).unwrap();
        let plain = model
            .forward_staged(&mut g1, &staged1, &tokens, None)
            .unwrap();

        let plan = SteeringPlan {
            biases: vec![vec![0.0; cfg.n_routed_experts]; cfg.n_moe_layers()],
        };
        let mut g2 = Graph::new();
        let staged2 = model.stage(&mut g2, false).unwrap();
        let steered = model
            .forward_staged(&mut g2, &staged2, &tokens, Some(&plan))
            .unwrap();

        assert_eq!(g1.data(plain.logits), g2.data(steered.logits));
        for (a, b) in plain.records.iter().zip(steered.records.iter()) {
            assert_eq!(a.selected, b.selected);
            assert_eq!(a.gates, b.gates);
        }
    }

    #[test]
    fn large_steering_bias_forces_support() {
        let cfg = tiny();
        let model = MoeLm::new(cfg.clone(), 21).unwrap();
        let tokens = [4u32, 9, 14, 0, 7, 11, 3];
        // Push everything onto experts {1, 3}.
        let mut bias = vec![0.0; cfg.n_routed_experts];
        bias[1] = 1e9;
        bias[3] = 1e9;
        let plan = SteeringPlan {
            biases: vec![bias; cfg.n_moe_layers()],
        };
        let mut g = Graph::new();
        let staged = model.stage(&mut g, false).unwrap();
        let fwd = model
            .forward_staged(&mut g, &staged, &tokens, Some(&plan))
            .unwrap();
        for rec in &fwd.records {
            for sel in &rec.selected {
                assert_eq!(sel, &vec![1, 3]);
            }
        }
    }

    #[test]
    fn wrong_size_steering_plan_is_config_error() {
        let cfg = tiny();
        let model = MoeLm::new(cfg.clone(), 0).unwrap();
        let plan = SteeringPlan {
            biases: vec![vec![0.0; cfg.n_routed_experts]],
        };
        let mut g = Graph::new();
        let staged = model.stage(&mut g, false).unwrap();
        let err = model
            .forward_staged(&mut g, &staged, &[1, 2], Some(&plan))
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unrouted_expert_gets_exactly_zero_gradient() {
        // Find a seed where some routed expert receives no tokens, then
        // check its gradient is exactly zero after backward.
        let cfg = tiny();
        let tokens = [1u32, 2, 3];
        for seed in 0..50 {
            let model = MoeLm::new(cfg.clone(), seed).unwrap();
            let mut g = Graph::new();
            let staged = model.stage(&mut g, true).unwrap();
            let fwd = model.forward_staged(&mut g, &staged, &tokens, None).unwrap();

            let mut unrouted: Option<(usize, usize)> = None; // (layer, expert)
            'search: for rec in &fwd.records {
                for j in 0..rec.n_experts {
                    if rec.selected.iter().all(|sel| !sel.contains(&j)) {
                        unrouted = Some((rec.layer, j));
                        break 'search;
                    }
                }
            }
            let Some((layer, j)) = unrouted else { continue };

            let loss = g.mean(fwd.logits);
            g.backward(loss).unwrap();
            let name = format!("{}.gate.weight", expert_prefix(&cfg, layer, false, j));
            let idx = model.params.id(&name).unwrap();
            let grad = g.grad(staged.ids[idx]).unwrap();
            assert!(grad.iter().all(|&v| v == 0.0));
            // And a routed expert's gradient is not all zero.
            let routed = fwd.records[0].selected[0][0];
            let rname = format!(
                "{}.gate.weight",
                expert_prefix(&cfg, fwd.records[0].layer, false, routed)
            );
            let ridx = model.params.id(&rname).unwrap();
            let rgrad = g.grad(staged.ids[ridx]).unwrap();
            assert!(rgrad.iter().any(|&v| v != 0.0));
            return;
        }
        panic!("no seed produced an unrouted expert");
    }
}
