//! Plain (tape-free) forward pass and greedy decoding.
//!
//! This path exists for tracing and generation, where gradients are never
//! needed and graph bookkeeping is pure overhead. Every step mirrors the
//! tape forward operation for operation, through the same raw kernels and
//! in the same accumulation order, so the two paths agree bitwise; the
//! parity test below holds them together.

use crate::error::Result;
use crate::model::config::GateMode;
use crate::model::net::{attn_scale, causal_mask, MoeLm, SteeringPlan, RMS_EPS};
use crate::model::params::expert_prefix;
use crate::model::router::{
    affinity_distribution, gates_for, select_top_k, LayerActivationRecord,
};
use crate::tensor::raw;

/// Plain forward result: flat `[T, vocab]` logits plus routing records.
pub struct InferOutput {
    pub logits: Vec<f64>,
    pub t_len: usize,
    pub vocab_size: usize,
    pub records: Vec<LayerActivationRecord>,
}

impl InferOutput {
    pub fn logits_at(&self, pos: usize) -> &[f64] {
        &self.logits[pos * self.vocab_size..(pos + 1) * self.vocab_size]
    }

    /// Greedy next token from the final position; ties break to the lowest
    /// token id.
    pub fn argmax_last(&self) -> u32 {
        let row = self.logits_at(self.t_len - 1);
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best as u32
    }
}

fn rmsnorm_plain(x: &[f64], w: &[f64], t_len: usize, d: usize) -> Vec<f64> {
    let inv_d = 1.0 / d as f64;
    let mut out = vec![0.0; t_len * d];
    for t in 0..t_len {
        let row = &x[t * d..(t + 1) * d];
        let mut ms = 0.0;
        for &v in row {
            ms += v * v;
        }
        let ms = ms * inv_d;
        let rs = (ms + RMS_EPS).powf(-0.5);
        for j in 0..d {
            out[t * d + j] = (row[j] * rs) * w[j];
        }
    }
    out
}

fn gated_mlp_plain(h: &[f64], n: usize, d: usize, ff: usize, wg: &[f64], wu: &[f64], wd: &[f64]) -> Vec<f64> {
    let gate = raw::matmul_nn(h, wg, n, d, ff);
    let up = raw::matmul_nn(h, wu, n, d, ff);
    let mut prod = vec![0.0; n * ff];
    for i in 0..n * ff {
        prod[i] = raw::silu(gate[i]) * up[i];
    }
    raw::matmul_nn(&prod, wd, n, ff, d)
}

impl MoeLm {
    /// Forward pass without a tape. Identical numerics to
    /// [`MoeLm::forward_staged`].
    pub fn forward(&self, tokens: &[u32], steering: Option<&SteeringPlan>) -> Result<InferOutput> {
        self.check_tokens(tokens)?;
        if let Some(plan) = steering {
            plan.validate(&self.config)?;
        }
        let cfg = &self.config;
        let d = cfg.d_model;
        let t_len = tokens.len();
        let positions: Vec<usize> = (0..t_len).collect();

        let w = |name: &str| -> Result<&[f64]> { Ok(&self.params.get(name)?.data) };

        let embed = w("embed.weight")?;
        let mut x = vec![0.0; t_len * d];
        for (t, &tok) in tokens.iter().enumerate() {
            x[t * d..(t + 1) * d].copy_from_slice(&embed[tok as usize * d..(tok as usize + 1) * d]);
        }
        let mask = causal_mask(t_len);

        let mut records = Vec::new();
        for layer in 0..cfg.n_layers {
            let xn = rmsnorm_plain(&x, w(&format!("layers.{layer}.attn_norm.weight"))?, t_len, d);
            let attn = self.attention_plain(layer, &xn, &positions, &mask, t_len)?;
            for i in 0..x.len() {
                x[i] += attn[i];
            }

            let xn = rmsnorm_plain(&x, w(&format!("layers.{layer}.ffn_norm.weight"))?, t_len, d);
            let ffn = if layer == 0 {
                gated_mlp_plain(
                    &xn,
                    t_len,
                    d,
                    cfg.d_ff_first,
                    w("layers.0.mlp.gate.weight")?,
                    w("layers.0.mlp.up.weight")?,
                    w("layers.0.mlp.down.weight")?,
                )
            } else {
                let bias = steering.and_then(|plan| plan.for_layer(layer));
                let (out, record) = self.moe_plain(layer, &xn, bias, t_len)?;
                records.push(record);
                out
            };
            for i in 0..x.len() {
                x[i] += ffn[i];
            }
        }

        let xn = rmsnorm_plain(&x, w("final_norm.weight")?, t_len, d);
        let logits = raw::matmul_nn(&xn, w("lm_head.weight")?, t_len, d, cfg.vocab_size);
        Ok(InferOutput {
            logits,
            t_len,
            vocab_size: cfg.vocab_size,
            records,
        })
    }

    fn attention_plain(
        &self,
        layer: usize,
        xn: &[f64],
        positions: &[usize],
        mask: &[f64],
        t_len: usize,
    ) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let w = |name: String| -> Result<&[f64]> { Ok(&self.params.get(&name)?.data) };

        let q_all = raw::matmul_nn(xn, w(format!("layers.{layer}.attn.wq.weight"))?, t_len, d, cfg.n_heads * hd);
        let k_all = raw::matmul_nn(xn, w(format!("layers.{layer}.attn.wk.weight"))?, t_len, d, cfg.n_kv_heads * hd);
        let v_all = raw::matmul_nn(xn, w(format!("layers.{layer}.attn.wv.weight"))?, t_len, d, cfg.n_kv_heads * hd);

        let slice_head = |src: &[f64], width: usize, h: usize| -> Vec<f64> {
            let mut out = vec![0.0; t_len * hd];
            for t in 0..t_len {
                out[t * hd..(t + 1) * hd]
                    .copy_from_slice(&src[t * width + h * hd..t * width + (h + 1) * hd]);
            }
            out
        };

        let group = cfg.n_heads / cfg.n_kv_heads;
        let scale = attn_scale(hd);
        let mut merged = vec![0.0; t_len * cfg.n_heads * hd];
        for h in 0..cfg.n_heads {
            let kv = h / group;
            let mut qh = slice_head(&q_all, cfg.n_heads * hd, h);
            let mut kh = slice_head(&k_all, cfg.n_kv_heads * hd, kv);
            let vh = slice_head(&v_all, cfg.n_kv_heads * hd, kv);
            for (t, &pos) in positions.iter().enumerate() {
                raw::rope_rotate_row(&mut qh[t * hd..(t + 1) * hd], pos, cfg.rope_base, 1.0);
                raw::rope_rotate_row(&mut kh[t * hd..(t + 1) * hd], pos, cfg.rope_base, 1.0);
            }
            let mut scores = raw::matmul_nt(&qh, &kh, t_len, hd, t_len);
            for s in scores.iter_mut() {
                *s *= scale;
            }
            for (s, &m) in scores.iter_mut().zip(mask.iter()) {
                *s += m;
            }
            for row in 0..t_len {
                raw::softmax_strided(&mut scores, row * t_len, t_len, 1);
            }
            let oh = raw::matmul_nn(&scores, &vh, t_len, t_len, hd);
            for t in 0..t_len {
                merged[t * cfg.n_heads * hd + h * hd..t * cfg.n_heads * hd + (h + 1) * hd]
                    .copy_from_slice(&oh[t * hd..(t + 1) * hd]);
            }
        }
        Ok(raw::matmul_nn(
            &merged,
            w(format!("layers.{layer}.attn.wo.weight"))?,
            t_len,
            cfg.n_heads * hd,
            d,
        ))
    }

    fn moe_plain(
        &self,
        layer: usize,
        xn: &[f64],
        steering_bias: Option<&[f64]>,
        t_len: usize,
    ) -> Result<(Vec<f64>, LayerActivationRecord)> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let e = cfg.n_routed_experts;
        let ff = cfg.d_ff_expert;
        let w = |name: String| -> Result<&[f64]> { Ok(&self.params.get(&name)?.data) };
        let expert_w = |which: &str, shared: bool, idx: usize| -> Result<&[f64]> {
            w(format!("{}.{which}.weight", expert_prefix(cfg, layer, shared, idx)))
        };

        let mut aff = raw::matmul_nn(
            xn,
            w(format!("layers.{layer}.moe.router.weight"))?,
            t_len,
            d,
            e,
        );
        if let Some(bias) = steering_bias {
            for t in 0..t_len {
                for j in 0..e {
                    aff[t * e + j] += bias[j];
                }
            }
        }

        let mut selected = Vec::with_capacity(t_len);
        let mut distribution = Vec::with_capacity(t_len);
        let mut gates = Vec::with_capacity(t_len);
        let mut expert_rows: Vec<Vec<usize>> = vec![Vec::new(); e];
        for t in 0..t_len {
            let a = &aff[t * e..(t + 1) * e];
            let sel = select_top_k(a, cfg.top_k);
            for &j in &sel {
                expert_rows[j].push(t);
            }
            distribution.push(affinity_distribution(a));
            gates.push(gates_for(a, &sel, cfg.gate_mode));
            selected.push(sel);
        }

        // Mirrors the tape's gate-source tensor.
        let gate_source: Vec<f64> = match cfg.gate_mode {
            GateMode::SigmoidUnnormalized => aff.iter().map(|&a| raw::sigmoid(a)).collect(),
            GateMode::SoftmaxTopKUnnormalized | GateMode::SoftmaxRenormalized => {
                let mut p = aff.clone();
                for t in 0..t_len {
                    raw::softmax_strided(&mut p, t * e, e, 1);
                }
                p
            }
        };
        let inv_denom: Option<Vec<f64>> = if cfg.gate_mode == GateMode::SoftmaxRenormalized {
            let mut denom = vec![0.0; t_len];
            for pos in 0..cfg.top_k {
                for t in 0..t_len {
                    denom[t] += gate_source[t * e + selected[t][pos]];
                }
            }
            Some(denom.iter().map(|&den| den.powf(-1.0)).collect())
        } else {
            None
        };

        // Accumulate expert contributions in the same order as the tape:
        // shared experts ascending, then routed experts ascending, each one
        // added over the full [T, d] block.
        let mut out = vec![0.0; t_len * d];
        let mut first = true;
        for s in 0..cfg.n_shared_experts {
            let part = gated_mlp_plain(
                xn,
                t_len,
                d,
                ff,
                expert_w("gate", true, s)?,
                expert_w("up", true, s)?,
                expert_w("down", true, s)?,
            );
            if first {
                out.copy_from_slice(&part);
                first = false;
            } else {
                for i in 0..out.len() {
                    out[i] += part[i];
                }
            }
        }
        for j in 0..e {
            let rows = &expert_rows[j];
            if rows.is_empty() {
                continue;
            }
            let mut hj = vec![0.0; rows.len() * d];
            for (r, &t) in rows.iter().enumerate() {
                hj[r * d..(r + 1) * d].copy_from_slice(&xn[t * d..(t + 1) * d]);
            }
            let ej = gated_mlp_plain(
                &hj,
                rows.len(),
                d,
                ff,
                expert_w("gate", false, j)?,
                expert_w("up", false, j)?,
                expert_w("down", false, j)?,
            );
            let mut placed = vec![0.0; t_len * d];
            for (r, &t) in rows.iter().enumerate() {
                let mut gate = gate_source[t * e + j];
                if let Some(inv) = &inv_denom {
                    gate *= inv[t];
                }
                for c in 0..d {
                    placed[t * d + c] += ej[r * d + c] * gate;
                }
            }
            if first {
                out.copy_from_slice(&placed);
                first = false;
            } else {
                for i in 0..out.len() {
                    out[i] += placed[i];
                }
            }
        }

        let record = LayerActivationRecord {
            layer,
            n_experts: e,
            selected,
            distribution,
            gates,
        };
        Ok((out, record))
    }

    /// Greedy decoding: appends `max_new` argmax tokens to the prompt,
    /// re-running the forward pass over the trailing `context_len` window.
    pub fn generate(
        &self,
        prompt: &[u32],
        max_new: usize,
        steering: Option<&SteeringPlan>,
    ) -> Result<Vec<u32>> {
        let mut tokens = prompt.to_vec();
        for _ in 0..max_new {
            let start = tokens.len().saturating_sub(self.config.context_len);
            let out = self.forward(&tokens[start..], steering)?;
            tokens.push(out.argmax_last());
        }
        Ok(tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;
    use crate::tensor::Graph;

    fn tiny(mode: GateMode) -> ModelConfig {
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
            gate_mode: mode,
        }
    }

    #[test]
    fn plain_forward_matches_tape_bitwise() {
        for mode in [
            GateMode::SigmoidUnnormalized,
            GateMode::SoftmaxTopKUnnormalized,
            GateMode::SoftmaxRenormalized,
        ] {
            let model = MoeLm::new(tiny(mode), 33).unwrap();
            let tokens = [2u32, 7, 1, 13, 4, 9, 0, 15];

            let mut g = Graph::new();
            let staged = model.stage(&mut g, false).unwrap();
            let tape = model.forward_staged(&mut g, &staged, &tokens, None).unwrap();
            let plain = model.forward(&tokens, None).unwrap();

            assert_eq!(
                g.data(tape.logits),
                plain.logits.as_slice(),
                "logits diverge for {mode:?}"
            );
            assert_eq!(tape.records.len(), plain.records.len());
            for (a, b) in tape.records.iter().zip(plain.records.iter()) {
                assert_eq!(a.selected, b.selected);
                assert_eq!(a.gates, b.gates);
                assert_eq!(a.distribution, b.distribution);
            }
        }
    }

    #[test]
    fn plain_forward_matches_tape_with_steering_and_tying() {
        let mut cfg = tiny(GateMode::SigmoidUnnormalized);
        cfg.tie_experts_across_layers = true;
        let model = MoeLm::new(cfg.clone(), 5).unwrap();
        let tokens = [3u32, 3, 8, 12];
        let plan = SteeringPlan {
            biases: vec![vec![0.5, -0.5, 1.0, 0.0]; cfg.n_moe_layers()],
        };

        let mut g = Graph::new();
        let staged = model.stage(&mut g, false).unwrap();
        let tape = model
            .forward_staged(&mut g, &staged, &tokens, Some(&plan))
            .unwrap();
        let plain = model.forward(&tokens, Some(&plan)).unwrap();
        assert_eq!(g.data(tape.logits), plain.logits.as_slice());
        for (a, b) in tape.records.iter().zip(plain.records.iter()) {
            assert_eq!(a.selected, b.selected);
            assert_eq!(a.gates, b.gates);
        }
    }

    #[test]
    fn generation_is_deterministic_and_grows() {
        let model = MoeLm::new(tiny(GateMode::SigmoidUnnormalized), 8).unwrap();
        let out1 = model.generate(&[1, 2, 3], 5, None).unwrap();
        let out2 = model.generate(&[1, 2, 3], 5, None).unwrap();
        assert_eq!(out1, out2);
        assert_eq!(out1.len(), 8);
        assert!(out1.iter().all(|&t| (t as usize) < 16));
    }

    #[test]
    fn generation_windows_past_context_len() {
        let mut cfg = tiny(GateMode::SigmoidUnnormalized);
        cfg.context_len = 8;
        let model = MoeLm::new(cfg, 8).unwrap();
        let out = model.generate(&[1, 2, 3, 4, 5, 6], 6, None).unwrap();
        assert_eq!(out.len(), 12);
    }
}
