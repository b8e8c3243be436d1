//! Shipping gate: one test per release criterion, each ending in a single
//! printed pass line with the measured numbers. Tolerances are pinned as
//! constants next to the checks they guard.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use moelab_core::data::{
    cheating_oracle, minhash_dedup, minhash_signature, jaccard_estimate, passkey_generate,
    passkey_score, synthetic_token_corpus, Document, MinHashParams, PasskeyParams,
};
use moelab_core::model::{
    abf_base_for_context, causal_mask, gated_mlp, GateMode, LayerActivationRecord, ModelConfig,
    MoeLm, Staged, SteeringPlan,
};
use moelab_core::scope::{detect_collapse, filter_embedding, h_utilization, routing_embedding, trace_samples};
use moelab_core::tok::{train_bpe, chars_per_token, mean_score, BpeTrainOptions, BpeVocab, DomainCorpus};
use moelab_core::train::{
    dpo_loss, dpo_loss_tape, load_balancing_loss, sft_loss, load_balancing_loss_tape, lr_at,
    train_loop, DpoConfig, MultiStepScheduleSpec, PreferencePair, ScheduleKind, TrainConfig,
};
use moelab_core::{grad_check, Graph};

fn pass(criterion: u32, detail: &str) {
    println!("criterion {criterion:02}: PASS - {detail}");
}

/// Small config with the production layer layout (dense first layer, MoE
/// above) kept narrow enough for numeric gradient probing.
fn tiny_config() -> ModelConfig {
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

#[test]
fn acceptance_01_scheduler_milestones_are_exact() {
    let spec = MultiStepScheduleSpec {
        warmup_steps: 2000,
        total_steps: 100_000,
        base_lr: 1e-4,
        drop_fractions: vec![0.30, 0.60, 0.90, 0.98],
        drop_factor: 0.25,
    };
    // Bitwise equalities, no tolerance.
    assert_eq!(lr_at(&spec, 2000).unwrap(), 1e-4);
    assert_eq!(lr_at(&spec, 30_001).unwrap(), 2.5e-5);
    assert_eq!(lr_at(&spec, 60_001).unwrap(), 6.25e-6);
    assert_eq!(lr_at(&spec, 90_001).unwrap(), 1.5625e-6);
    assert_eq!(lr_at(&spec, 98_001).unwrap(), 3.90625e-7);
    // Boundary semantics: the drop applies strictly after the floor step.
    assert_eq!(lr_at(&spec, 30_000).unwrap(), 1e-4);
    pass(1, "five multi-step milestones exact in 64-bit arithmetic");
}

#[test]
fn acceptance_02_abf_table_is_exact() {
    assert_eq!(abf_base_for_context(8_192).unwrap(), 10_000.0);
    assert_eq!(abf_base_for_context(32_768).unwrap(), 300_000.0);
    assert_eq!(abf_base_for_context(131_072).unwrap(), 1_400_000.0);
    assert!(abf_base_for_context(1234).is_err());
    pass(2, "context extension base table exact at 10k/300k/1.4M");
}

const GRAD_TOL: f64 = 1e-5;
const GRAD_EPS: f64 = 1e-5;
/// Central differences on an O(1) loss carry ~1e-11 of rounding noise, so
/// coordinates whose gradient sits near zero are compared absolutely: the
/// denominator never drops below ATOL / GRAD_TOL.
const GRAD_ATOL: f64 = 1e-9;

fn grad_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(GRAD_ATOL / GRAD_TOL))
        .fold(0.0, f64::max)
}

#[test]
fn acceptance_03_gradient_checks() {
    let started = Instant::now();

    // (a) preference loss at 50 seeded inputs.
    let mut worst_dpo = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let cfg = DpoConfig::new(0.05 + 0.003 * seed as f64, 0.11);
        let report = grad_check(
            |g, leaf| {
                let mut rw = Vec::new();
                let mut rl = Vec::new();
                for i in 0..3 {
                    rw.push(g.slice_cols(leaf, 2 * i, 2 * i + 1)?);
                    rl.push(g.slice_cols(leaf, 2 * i + 1, 2 * i + 2)?);
                }
                dpo_loss_tape(g, &rw, &rl, &cfg)
            },
            &x,
            &[1, 6],
            GRAD_EPS,
        )
        .unwrap();
        worst_dpo = worst_dpo.max(grad_err(&report.analytic, &report.numeric));
    }
    assert!(worst_dpo < GRAD_TOL, "preference loss worst {worst_dpo:e}");

    // (b) full model loss against every parameter tensor of MoE layer 1.
    let model = MoeLm::new(tiny_config(), 11).unwrap();
    let tokens: Vec<u32> = vec![3, 1, 4, 1, 5, 9];
    let targets: Vec<usize> = vec![1, 4, 1, 5, 9, 2];
    let layer_params: Vec<(usize, String, Vec<usize>, Vec<f64>)> = model
        .params
        .iter()
        .enumerate()
        .filter(|(_, p)| p.name.starts_with("layers.1."))
        .map(|(i, p)| (i, p.name.clone(), p.shape.clone(), p.data.clone()))
        .collect();
    assert!(layer_params.len() >= 12, "layer 1 should hold attention, norms, router, experts");
    let mut worst_model = 0.0f64;
    let mut checked_values = 0usize;
    for (idx, name, shape, data) in &layer_params {
        let report = grad_check(
            |g, leaf| {
                let ids = model
                    .params
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        if i == *idx {
                            Ok(leaf)
                        } else {
                            g.leaf(p.data.clone(), &p.shape, false)
                        }
                    })
                    .collect::<moelab_core::Result<Vec<_>>>()?;
                let staged = Staged { ids };
                let fwd = model.forward_staged(g, &staged, &tokens, None)?;
                let ce = sft_loss(g, fwd.logits, &targets, &vec![true; tokens.len()])?;
                let aux = load_balancing_loss_tape(g, &fwd.affinities, &fwd.records)?;
                let aux = g.scale(aux, 0.01);
                g.add(ce, aux)
            },
            data,
            shape,
            GRAD_EPS,
        )
        .unwrap();
        let err = grad_err(&report.analytic, &report.numeric);
        assert!(err < GRAD_TOL, "{name}: gradient error {err:e}");
        worst_model = worst_model.max(err);
        checked_values += data.len();
    }

    // (c) the attention block, rotary embeddings included, w.r.t. its input.
    let t = 5;
    let d = model.config.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x: Vec<f64> = (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let positions: Vec<usize> = (0..t).collect();
    let report = grad_check(
        |g, leaf| {
            let staged = model.stage(g, false)?;
            let mask = g.constant(causal_mask(t), &[t, t])?;
            let out = model.attention(g, &staged, 1, leaf, &positions, mask)?;
            Ok(g.sum(out))
        },
        &x,
        &[t, d],
        GRAD_EPS,
    )
    .unwrap();
    let attn_err = grad_err(&report.analytic, &report.numeric);
    assert!(attn_err < GRAD_TOL, "attention gradient error {attn_err:e}");

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "gradient checks took {elapsed:.1}s");
    pass(
        3,
        &format!(
            "errors: preference {worst_dpo:.1e}, model layer {worst_model:.1e} over {checked_values} values, attention {attn_err:.1e}; {elapsed:.1}s"
        ),
    );
}

const DPO_TOL: f64 = 1e-12;

#[test]
fn acceptance_04_preference_loss_reductions() {
    let started = Instant::now();

    // Identical policy and reference: both ratios vanish and the loss is
    // exactly -ln sigmoid(0) = ln 2 (the trailing term is c * 0).
    let logps = vec![-1.25, -0.5, -2.0];
    let pair = PreferencePair {
        prompt: vec![1, 2],
        chosen: vec![3, 4, 5],
        rejected: vec![6, 7, 8],
        policy_chosen_logps: logps.clone(),
        policy_rejected_logps: logps.clone(),
        reference_chosen_logps: logps.clone(),
        reference_rejected_logps: logps.clone(),
    };
    let loss = dpo_loss(&[pair], &DpoConfig::new(0.1, 0.1)).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < DPO_TOL, "{loss}");

    // With equal betas and no trailing term, the loss must agree with a
    // standard preference objective coded here from the formula.
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let beta = rng.random_range(0.02..0.5);
        let n_pairs = rng.random_range(1..5);
        let mut pairs = Vec::new();
        let mut oracle_sum = 0.0;
        for _ in 0..n_pairs {
            let len_w = rng.random_range(1..6);
            let len_l = rng.random_range(1..6);
            let sample = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
                (0..n).map(|_| -rng.random_range(0.01..3.0)).collect()
            };
            let (pw, rw) = (sample(&mut rng, len_w), sample(&mut rng, len_w));
            let (pl, rl) = (sample(&mut rng, len_l), sample(&mut rng, len_l));
            let ratio_w: f64 = pw.iter().sum::<f64>() - rw.iter().sum::<f64>();
            let ratio_l: f64 = pl.iter().sum::<f64>() - rl.iter().sum::<f64>();
            // Independent route: -ln sigmoid(z) written directly.
            let z = beta * (ratio_w - ratio_l);
            oracle_sum += (1.0 + (-z).exp()).ln();
            pairs.push(PreferencePair {
                prompt: vec![0],
                chosen: (0..len_w as u32).collect(),
                rejected: (0..len_l as u32).collect(),
                policy_chosen_logps: pw,
                policy_rejected_logps: pl,
                reference_chosen_logps: rw,
                reference_rejected_logps: rl,
            });
        }
        let oracle = oracle_sum / n_pairs as f64;
        let cfg = DpoConfig {
            nll_term_coefficient: 0.0,
            ..DpoConfig::new(beta, beta)
        };
        let got = dpo_loss(&pairs, &cfg).unwrap();
        worst = worst.max((got - oracle).abs());
    }
    assert!(worst < DPO_TOL, "worst oracle gap {worst:e}");

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 5.0);
    pass(4, &format!("ln 2 fixed point and 100-case oracle agreement, worst gap {worst:.1e}"));
}

const EQUIV_TOL: f64 = 1e-12;

#[test]
fn acceptance_05_single_expert_moe_collapses_to_dense_mlp() {
    let started = Instant::now();
    let cfg = ModelConfig {
        n_shared_experts: 0,
        n_routed_experts: 1,
        top_k: 1,
        gate_mode: GateMode::SoftmaxRenormalized,
        ..tiny_config()
    };
    let model = MoeLm::new(cfg, 21).unwrap();
    let d = model.config.d_model;
    let t = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x: Vec<f64> = (0..t * d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let mut g = Graph::new();
        let staged = model.stage(&mut g, false).unwrap();
        let xn = g.leaf(x.clone(), &[t, d], false).unwrap();
        let (moe_out, record, _) = model.moe_block(&mut g, &staged, 1, xn, None).unwrap();

        let pid = |name: &str| staged.ids[model.params.id(name).unwrap()];
        let dense = gated_mlp(
            &mut g,
            xn,
            pid("layers.1.moe.expert.0.gate.weight"),
            pid("layers.1.moe.expert.0.up.weight"),
            pid("layers.1.moe.expert.0.down.weight"),
        )
        .unwrap();
        let a = g.data(moe_out);
        let b = g.data(dense);
        assert!(record.selected.iter().all(|s| s == &[0]));
        for (va, vb) in a.iter().zip(b) {
            worst = worst.max((va - vb).abs());
        }
        assert!(worst < EQUIV_TOL, "divergence {worst:e}");
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 5.0);
    pass(5, &format!("100 inputs, max |moe - dense| = {worst:.1e}"));
}

#[test]
fn acceptance_06_routing_embedding_row_sums_and_filter() {
    let started = Instant::now();
    let model = MoeLm::new(ModelConfig::desk_default(), 33).unwrap();
    let cfg = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let samples: Vec<(String, Vec<u32>)> = (0..100)
        .map(|i| {
            let tokens: Vec<u32> = (0..100)
                .map(|_| rng.random_range(0..cfg.vocab_size as u32))
                .collect();
            (format!("s{i:03}"), tokens)
        })
        .collect();
    let total_tokens: usize = samples.iter().map(|(_, t)| t.len()).sum();
    assert_eq!(total_tokens, 10_000);

    let traces = trace_samples(&model, &samples, None).unwrap();
    let k = cfg.top_k as f64;
    for trace in &traces {
        let emb = routing_embedding(trace).unwrap();
        for layer in 0..cfg.n_layers - 1 {
            // Exact equality: the embedding is backed by integer counts.
            assert_eq!(emb.row_sum(layer).unwrap(), k, "sample {}", trace.sample_id);
        }
        let filtered = filter_embedding(&emb, cfg.n_routed_experts).unwrap();
        let twice = filter_embedding(&filtered, cfg.n_routed_experts).unwrap();
        assert_eq!(filtered.values(), twice.values(), "filter must be idempotent");
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "{elapsed:.1}s");
    pass(6, &format!("100 traces x 10k tokens: every row sums to top_k exactly; filter idempotent; {elapsed:.1}s"));
}

#[test]
fn acceptance_07_steering_dominance_and_zero_strength_identity() {
    let started = Instant::now();
    let model = MoeLm::new(ModelConfig::desk_small(), 44).unwrap();
    let cfg = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tokens: Vec<u32> = (0..200).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();

    // Strength 1e9 on support {2, 5} (size == top_k) must own every selection.
    let support = [2usize, 5usize];
    let mut bias = vec![0.0; cfg.n_routed_experts];
    for &e in &support {
        bias[e] = 1e9;
    }
    let plan = SteeringPlan {
        biases: vec![bias; cfg.n_layers - 1],
    };
    let steered = model.forward(&tokens, Some(&plan)).unwrap();
    let mut selections = 0usize;
    for rec in &steered.records {
        for sel in &rec.selected {
            for &e in sel {
                assert!(support.contains(&e), "selection {e} escaped the support");
                selections += 1;
            }
        }
    }
    assert_eq!(selections, 200 * (cfg.n_layers - 1) * cfg.top_k);

    // Strength 0 must be bitwise the unsteered run.
    let zero_plan = SteeringPlan {
        biases: vec![vec![0.0; cfg.n_routed_experts]; cfg.n_layers - 1],
    };
    let plain = model.forward(&tokens, None).unwrap();
    let zeroed = model.forward(&tokens, Some(&zero_plan)).unwrap();
    assert_eq!(plain.logits, zeroed.logits);
    assert_eq!(plain.records, zeroed.records);

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "{elapsed:.1}s");
    pass(7, &format!("{selections} steered selections all in support; zero strength bitwise identical; {elapsed:.1}s"));
}

const ENTROPY_TOL: f64 = 1e-12;

fn record_with_selection(layer: usize, n_experts: usize, selected: Vec<Vec<usize>>) -> LayerActivationRecord {
    let n_tokens = selected.len();
    let uniform = vec![1.0 / n_experts as f64; n_experts];
    LayerActivationRecord {
        layer,
        n_experts,
        selected: selected.clone(),
        distribution: vec![uniform; n_tokens],
        gates: selected.iter().map(|s| vec![1.0; s.len()]).collect(),
    }
}

#[test]
fn acceptance_08_telemetry_calibration() {
    let started = Instant::now();
    let n = 8;

    let uniform: Vec<Vec<usize>> = (0..800).map(|t| vec![t % n]).collect();
    let h_uni = h_utilization(&[record_with_selection(1, n, uniform)], 1).unwrap();
    assert!((h_uni - 1.0).abs() < ENTROPY_TOL, "{h_uni}");

    let single: Vec<Vec<usize>> = (0..800).map(|_| vec![3]).collect();
    let h_single = h_utilization(&[record_with_selection(1, n, single)], 1).unwrap();
    assert_eq!(h_single, 0.0);

    // 1000 assignments, expert 7 planted at exactly 1%.
    let mut sel: Vec<Vec<usize>> = Vec::new();
    for t in 0..990 {
        sel.push(vec![t % 7]);
    }
    for _ in 0..10 {
        sel.push(vec![7]);
    }
    let rec = record_with_selection(2, n, sel);
    let flagged = detect_collapse(&[rec], 0.0125).unwrap();
    assert_eq!(flagged, vec![(2, 7)]);

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 5.0);
    pass(8, "H_utilization 1.0/0.0 fixed points exact; 1% expert flagged at threshold 0.0125");
}

#[test]
fn acceptance_09_load_balancing_fixed_points() {
    let started = Instant::now();
    let n = 4;

    // Uniform: f_i = P_i = 1/N, loss = N * sum(1/N^2) = 1 exactly.
    let uniform: Vec<Vec<usize>> = (0..400).map(|t| vec![t % n]).collect();
    let l_uniform = load_balancing_loss(&[record_with_selection(1, n, uniform)]).unwrap();
    assert_eq!(l_uniform, 1.0);

    // Full collapse: f_0 = P_0 = 1, loss = N.
    let collapsed: Vec<Vec<usize>> = (0..400).map(|_| vec![0]).collect();
    let mut rec = record_with_selection(1, n, collapsed);
    let mut one_hot = vec![0.0; n];
    one_hot[0] = 1.0;
    rec.distribution = vec![one_hot; 400];
    assert_eq!(load_balancing_loss(&[rec]).unwrap(), n as f64);

    // Two-expert split (0.5, 0.5, 0, 0): loss = N * 2 * 0.25 = 2.
    let split: Vec<Vec<usize>> = (0..400).map(|t| vec![t % 2]).collect();
    let mut rec = record_with_selection(1, n, split);
    rec.distribution = vec![vec![0.5, 0.5, 0.0, 0.0]; 400];
    assert_eq!(load_balancing_loss(&[rec]).unwrap(), 2.0);

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 1.0);
    pass(9, "balance loss exactly 1.0 uniform, N collapsed, 2.0 on the half-half fixture");
}

#[test]
fn acceptance_10_tokenizer_roundtrip_and_ratios() {
    let started = Instant::now();

    let corpus: Vec<&[u8]> = vec![
        b"fn main() { let x = compute(); }",
        b"the quick brown fox jumps over the lazy dog",
        "привет мир как дела сегодня".as_bytes(),
        b"aaab aaab banana bandana",
    ];
    let vocab = train_bpe(&corpus, 320, &BpeTrainOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(210);
    for case in 0..10_000 {
        let len = rng.random_range(0..200);
        let text: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let back = vocab.decode(&vocab.encode(&text)).unwrap();
        assert_eq!(back, text, "roundtrip failed on case {case}");
    }

    let identity = BpeVocab::byte_identity();
    let ascii = DomainCorpus::new("ascii", vec![b"exactly one byte per character here".to_vec()]);
    assert_eq!(chars_per_token(&identity, &ascii).unwrap(), 1.0);

    let row_a = mean_score(&[3.57, 4.15, 4.62, 3.61, 4.18, 3.34, 4.47]);
    let row_b = mean_score(&[3.74, 4.43, 4.88, 3.39, 3.40, 3.07, 4.68]);
    assert_eq!(format!("{row_a:.2}"), "3.99");
    assert_eq!(format!("{row_b:.2}"), "3.94");

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "{elapsed:.1}s");
    pass(10, &format!("10k roundtrips, ASCII identity ratio 1.0, mean rows 3.99/3.94; {elapsed:.1}s"));
}

#[test]
fn acceptance_11_minhash_estimates_and_planted_dedup() {
    let started = Instant::now();
    let num_hashes = 128;
    let tol = 3.0 / (num_hashes as f64).sqrt();

    // Brute-force Jaccard over character shingle sets, coded from the
    // definition as the reference route.
    let brute = |a: &str, b: &str, k: usize| -> f64 {
        use std::collections::HashSet;
        let sh = |s: &str| -> HashSet<String> {
            let cs: Vec<char> = s.chars().collect();
            if cs.len() < k {
                return [s.to_string()].into_iter().collect();
            }
            (0..=cs.len() - k).map(|i| cs[i..i + k].iter().collect()).collect()
        };
        let (sa, sb) = (sh(a), sh(b));
        let union = sa.union(&sb).count();
        if union == 0 {
            return 1.0;
        }
        sa.intersection(&sb).count() as f64 / union as f64
    };
    let rand_text = |rng: &mut ChaCha8Rng, len: usize| -> String {
        (0..len).map(|_| (b'a' + rng.random_range(0..26u8)) as char).collect()
    };

    let trials = 1000;
    let mut within = 0;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(40_000 + t);
        let base = rand_text(&mut rng, 300);
        let keep = rng.random_range(50..300);
        let b = format!("{}{}", &base[..keep], rand_text(&mut rng, 300 - keep));
        let truth = brute(&base, &b, 5);
        let sa = minhash_signature(&base, num_hashes, 5, t).unwrap();
        let sb = minhash_signature(&b, num_hashes, 5, t).unwrap();
        let est = jaccard_estimate(&sa, &sb).unwrap();
        if (est - truth).abs() <= tol {
            within += 1;
        }
    }
    assert!(within >= 990, "{within}/1000 within 3/sqrt(128)");

    // 50 near-duplicate pairs and 50 unrelated docs at threshold 0.8.
    let mut docs = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for i in 0..50 {
        let base = rand_text(&mut rng, 400);
        let near = format!("{} slightly amended tail", &base[..380]);
        docs.push(Document::new(format!("p{i:02}-a"), base));
        docs.push(Document::new(format!("p{i:02}-b"), near));
    }
    for i in 0..50 {
        docs.push(Document::new(format!("solo-{i:02}"), rand_text(&mut rng, 400)));
    }
    let outcome = minhash_dedup(docs, &MinHashParams::default()).unwrap();
    let mut caught = 0;
    for c in &outcome.clusters {
        // Any cluster mixing pairs, or touching a solo doc, is a false merge.
        assert!(c.survivor.ends_with("-a"), "unexpected survivor {}", c.survivor);
        let stem = &c.survivor[..3];
        assert_eq!(c.duplicates.len(), 1, "cluster around {} grew", c.survivor);
        assert_eq!(c.duplicates[0].0, format!("{stem}-b"));
        caught += 1;
    }
    assert!(caught >= 48, "only {caught}/50 planted pairs caught");
    assert_eq!(
        outcome.survivors.iter().filter(|d| d.id.starts_with("solo")).count(),
        50,
        "an unrelated document was merged away"
    );

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "{elapsed:.1}s");
    pass(11, &format!("{within}/1000 estimates in tolerance; {caught}/50 pairs caught, 0 false merges; {elapsed:.1}s"));
}

#[test]
fn acceptance_12_desk_training_smoke() {
    let started = Instant::now();
    let cfg = ModelConfig::desk_small();
    assert_eq!(cfg.n_layers, 6);
    let corpus = synthetic_token_corpus(200_000, cfg.vocab_size as u32, 42).unwrap();
    let tcfg = TrainConfig {
        seed: 7,
        seq_len: 64,
        batch_size: 4,
        total_steps: 500,
        schedule: ScheduleKind::MultiStep,
        warmup_steps: 10,
        base_lr: 3e-3,
        aux_loss_weight: 0.01,
        ..TrainConfig::default()
    };

    let run = |tag: &str| {
        let dir = std::env::temp_dir().join(format!("acc12-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let mut model = MoeLm::new(cfg.clone(), 1).unwrap();
        let out = train_loop(&mut model, &corpus, &tcfg, &dir).unwrap();
        let ckpt = std::fs::read(&out.final_checkpoint).unwrap();
        let telemetry = std::fs::read_to_string(&out.telemetry_path).unwrap();
        std::fs::remove_dir_all(&dir).unwrap();
        (model, out, ckpt, telemetry)
    };

    let (model, out, ckpt_a, telemetry) = run("a");
    for line in telemetry.lines().skip(1) {
        let loss: f64 = line.split('\t').nth(2).unwrap().parse().unwrap();
        assert!(loss.is_finite(), "non-finite loss in telemetry: {line}");
    }
    assert!(
        out.final_loss <= 0.70 * out.first_loss,
        "loss {} -> {} is less than a 30% drop",
        out.first_loss,
        out.final_loss
    );

    // Router health on held-out text, per MoE layer.
    let eval = synthetic_token_corpus(4096, cfg.vocab_size as u32, 43).unwrap();
    let mut records = Vec::new();
    for w in eval.chunks_exact(cfg.context_len.min(128)) {
        records.extend(model.forward(w, None).unwrap().records);
    }
    let mut h_min = f64::INFINITY;
    for layer in 1..cfg.n_layers {
        let h = h_utilization(&records, layer).unwrap();
        assert!(h >= 0.5, "layer {layer} H_utilization {h:.3}");
        h_min = h_min.min(h);
    }

    let (_, _, ckpt_b, _) = run("b");
    assert_eq!(ckpt_a, ckpt_b, "identical-seed runs must give byte-identical checkpoints");

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 900.0, "{elapsed:.0}s exceeds the 15 minute budget");
    pass(12, &format!(
        "loss {:.3} -> {:.3} ({:.0}% drop), min layer H_utilization {h_min:.3}, byte-identical reruns; {elapsed:.0}s",
        out.first_loss,
        out.final_loss,
        100.0 * (1.0 - out.final_loss / out.first_loss)
    ));
}

#[test]
fn acceptance_13_passkey_harness_validates_via_oracle() {
    let started = Instant::now();
    let vocab = BpeVocab::byte_identity();
    let budgets = [512usize, 2048, 8192];
    let mut correct = 0;
    let mut total = 0;
    for (bi, &budget) in budgets.iter().enumerate() {
        for s in 0..5u64 {
            let key = format!("{}", 10_000 + 731 * (bi as u64 * 5 + s));
            let params = PasskeyParams::new(budget, key, s);
            let sample = passkey_generate(&params, &vocab).unwrap();
            let tokens = vocab.encode(sample.document.as_bytes()).len() as f64;
            assert!(
                (tokens - budget as f64).abs() <= 0.02 * budget as f64,
                "budget {budget}: {tokens} tokens"
            );
            // The oracle reads the key sentence straight off the document;
            // it exists to validate the scorer. The desk-scale model is
            // not expected to pass this retrieval task and is not scored
            // here.
            let answer = cheating_oracle(&sample.document).unwrap();
            total += 1;
            if passkey_score(&answer, &sample.key) {
                correct += 1;
            }
        }
    }
    assert_eq!(correct, total, "oracle accuracy must be 1.000");
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "{elapsed:.1}s");
    pass(13, &format!("accuracy {:.3} over {} docs at budgets 512/2048/8192; {elapsed:.1}s", correct as f64 / total as f64, total));
}
