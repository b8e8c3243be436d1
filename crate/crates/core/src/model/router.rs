//! Expert selection and gate computation.
//!
//! The router produces one raw affinity per routed expert. Selection is
//! top-k by affinity with ties broken toward the lower expert index, and
//! the resulting gates follow the configured [`GateMode`]. In the two
//! unnormalized modes the gates are used exactly as produced; they are
//! deliberately not rescaled to sum to one.

use crate::error::{Error, Result};
use crate::model::config::GateMode;
use crate::tensor::raw;

/// Routing decision for a single token.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterOutput {
    /// Raw affinities, one per routed expert (steering bias included when
    /// active).
    pub affinities: Vec<f64>,
    /// Selected expert indices in ascending order.
    pub selected: Vec<usize>,
    /// Combination gates aligned with `selected`.
    pub gates: Vec<f64>,
}

/// Routing activity of one MoE layer over a token sequence. `layer` is the
/// absolute transformer layer index (the first layer is dense, so records
/// start at layer 1).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerActivationRecord {
    pub layer: usize,
    pub n_experts: usize,
    /// Per token, selected experts in ascending order.
    pub selected: Vec<Vec<usize>>,
    /// Per token, the full softmax distribution over routed experts.
    pub distribution: Vec<Vec<f64>>,
    /// Per token, gates aligned with `selected`.
    pub gates: Vec<Vec<f64>>,
}

impl LayerActivationRecord {
    pub fn n_tokens(&self) -> usize {
        self.selected.len()
    }
}

/// Indices of the `k` largest affinities, ties broken toward the lower
/// index, returned in ascending index order.
pub fn select_top_k(affinities: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..affinities.len()).collect();
    order.sort_by(|&i, &j| affinities[j].total_cmp(&affinities[i]).then(i.cmp(&j)));
    let mut picked: Vec<usize> = order.into_iter().take(k).collect();
    picked.sort_unstable();
    picked
}

/// Gates for already-selected experts, from raw affinities.
///
/// The renormalized mode mirrors the tape implementation operation for
/// operation (ascending-order sum, reciprocal via powf) so that both paths
/// agree bitwise.
pub fn gates_for(affinities: &[f64], selected: &[usize], mode: GateMode) -> Vec<f64> {
    match mode {
        GateMode::SigmoidUnnormalized => selected
            .iter()
            .map(|&j| raw::sigmoid(affinities[j]))
            .collect(),
        GateMode::SoftmaxTopKUnnormalized | GateMode::SoftmaxRenormalized => {
            let mut probs = affinities.to_vec();
            raw::softmax_slice(&mut probs);
            let picked: Vec<f64> = selected.iter().map(|&j| probs[j]).collect();
            if mode == GateMode::SoftmaxTopKUnnormalized {
                picked
            } else {
                let mut denom = 0.0;
                for &p in &picked {
                    denom += p;
                }
                let inv = denom.powf(-1.0);
                picked.iter().map(|&p| p * inv).collect()
            }
        }
    }
}

/// Full softmax distribution over routed experts, used in activation
/// records and entropy telemetry.
pub fn affinity_distribution(affinities: &[f64]) -> Vec<f64> {
    let mut probs = affinities.to_vec();
    raw::softmax_slice(&mut probs);
    probs
}

/// Routes a single token: `affinities = h x weights` (+ optional steering
/// bias), then top-k selection and gating.
///
/// `weights` is `[d_model, n_experts]` row-major.
pub fn router_forward(
    h: &[f64],
    weights: &[f64],
    n_experts: usize,
    top_k: usize,
    mode: GateMode,
    steering: Option<&[f64]>,
) -> Result<RouterOutput> {
    let d_model = h.len();
    if weights.len() != d_model * n_experts {
        return Err(Error::Shape {
            op: "router_forward",
            lhs: vec![d_model],
            rhs: vec![weights.len() / n_experts.max(1), n_experts],
        });
    }
    if top_k == 0 || top_k > n_experts {
        return Err(Error::config(format!(
            "top_k {top_k} must be in 1..={n_experts}"
        )));
    }
    let mut affinities = raw::matmul_nn(h, weights, 1, d_model, n_experts);
    if let Some(bias) = steering {
        if bias.len() != n_experts {
            return Err(Error::config(format!(
                "steering bias has {} entries for {} experts",
                bias.len(),
                n_experts
            )));
        }
        for (a, b) in affinities.iter_mut().zip(bias.iter()) {
            *a += b;
        }
    }
    let selected = select_top_k(&affinities, top_k);
    let gates = gates_for(&affinities, &selected, mode);
    Ok(RouterOutput {
        affinities,
        selected,
        gates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_gates_on_known_affinities() {
        // Identity-ish routing: h picks affinities directly.
        let affinities = [2.0, 1.0, 0.5, -1.0];
        let selected = select_top_k(&affinities, 2);
        assert_eq!(selected, vec![0, 1]);
        let gates = gates_for(&affinities, &selected, GateMode::SigmoidUnnormalized);
        assert!((gates[0] - 0.8807970779778823).abs() < 1e-12);
        assert!((gates[1] - 0.7310585786300049).abs() < 1e-12);
        // Unnormalized: the pair sums to more than 1 here.
        assert!(gates[0] + gates[1] > 1.0);
    }

    #[test]
    fn ties_break_toward_lower_index() {
        assert_eq!(select_top_k(&[3.0, 3.0, 3.0], 2), vec![0, 1]);
        assert_eq!(select_top_k(&[1.0, 3.0, 3.0, 0.0], 2), vec![1, 2]);
        // Tie at the selection boundary: index 0 beats index 2.
        assert_eq!(select_top_k(&[2.0, 5.0, 2.0], 2), vec![0, 1]);
    }

    #[test]
    fn selection_is_ascending_and_sized() {
        let affs = [0.3, -1.0, 2.5, 0.7, 0.1];
        for k in 1..=5 {
            let sel = select_top_k(&affs, k);
            assert_eq!(sel.len(), k);
            assert!(sel.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn softmax_topk_gates_are_unnormalized() {
        let affinities = [1.0, 0.0, -1.0, -2.0];
        let selected = select_top_k(&affinities, 2);
        let gates = gates_for(&affinities, &selected, GateMode::SoftmaxTopKUnnormalized);
        let total: f64 = gates.iter().sum();
        // Top-2 of a 4-way softmax carries less than full mass.
        assert!(total < 1.0);
        let dist = affinity_distribution(&affinities);
        assert_eq!(gates[0], dist[0]);
        assert_eq!(gates[1], dist[1]);
    }

    #[test]
    fn renormalized_gates_sum_to_one() {
        let affinities = [1.0, 0.0, -1.0, -2.0, 3.0];
        let selected = select_top_k(&affinities, 3);
        let gates = gates_for(&affinities, &selected, GateMode::SoftmaxRenormalized);
        let total: f64 = gates.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn router_forward_matches_manual_matmul() {
        // d=2, e=3; weights [[1, 0, 2], [0, 1, -1]].
        let out = router_forward(
            &[1.0, 2.0],
            &[1.0, 0.0, 2.0, 0.0, 1.0, -1.0],
            3,
            2,
            GateMode::SigmoidUnnormalized,
            None,
        )
        .unwrap();
        assert_eq!(out.affinities, vec![1.0, 2.0, 0.0]);
        assert_eq!(out.selected, vec![0, 1]);
    }

    #[test]
    fn steering_bias_shifts_selection() {
        let w = [1.0, 0.0, 0.0, 1.0]; // d=2, e=2 identity
        let base = router_forward(&[2.0, 1.0], &w, 2, 1, GateMode::SigmoidUnnormalized, None).unwrap();
        assert_eq!(base.selected, vec![0]);
        let steered = router_forward(
            &[2.0, 1.0],
            &w,
            2,
            1,
            GateMode::SigmoidUnnormalized,
            Some(&[0.0, 5.0]),
        )
        .unwrap();
        assert_eq!(steered.selected, vec![1]);
    }

    #[test]
    fn top_k_out_of_range_is_config_error() {
        let err = router_forward(&[1.0], &[1.0, 1.0], 2, 3, GateMode::SigmoidUnnormalized, None)
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn full_selection_with_k_equal_to_experts() {
        let out = router_forward(
            &[1.0, -1.0],
            &[0.5, 0.25, -0.5, 1.0, 2.0, 0.0],
            3,
            3,
            GateMode::SoftmaxRenormalized,
            None,
        )
        .unwrap();
        assert_eq!(out.selected, vec![0, 1, 2]);
        let total: f64 = out.gates.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn selected_is_ascending_unique(
                affs in proptest::collection::vec(-5.0f64..5.0, 1..12),
                k in 1usize..12,
            ) {
                let k = k.min(affs.len());
                let sel = select_top_k(&affs, k);
                prop_assert_eq!(sel.len(), k);
                prop_assert!(sel.windows(2).all(|w| w[0] < w[1]));
                // Every unselected affinity is <= every selected one.
                let min_sel = sel.iter().map(|&i| affs[i]).fold(f64::INFINITY, f64::min);
                for (i, &a) in affs.iter().enumerate() {
                    if !sel.contains(&i) {
                        prop_assert!(a <= min_sel);
                    }
                }
            }

            #[test]
            fn sigmoid_gates_lie_in_unit_interval(
                affs in proptest::collection::vec(-30.0f64..30.0, 4),
            ) {
                let sel = select_top_k(&affs, 2);
                let gates = gates_for(&affs, &sel, GateMode::SigmoidUnnormalized);
                prop_assert!(gates.iter().all(|g| *g > 0.0 && *g < 1.0));
            }

            #[test]
            fn renormalized_gates_always_sum_to_one(
                affs in proptest::collection::vec(-10.0f64..10.0, 6),
                k in 1usize..=6,
            ) {
                let sel = select_top_k(&affs, k);
                let gates = gates_for(&affs, &sel, GateMode::SoftmaxRenormalized);
                let total: f64 = gates.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}
