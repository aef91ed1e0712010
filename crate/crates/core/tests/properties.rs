//! Property suites over randomized inputs.

use fedbag_core::loss::{hazards, survival_curve, survival_nll, SurvivalLabel};
use fedbag_core::metrics::{c_index, log_rank, roc_auc};
use fedbag_core::model::{forward_bag, init_weights, ForwardMode, ModelDims};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn bag_strategy() -> impl Strategy<Value = (u64, Vec<Vec<f64>>)> {
    (
        any::<u64>(),
        prop::collection::vec(
            prop::collection::vec(-3.0..3.0f64, 6usize),
            1..12usize,
        ),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_is_normalized_and_logits_permutation_invariant(
        (seed, rows) in bag_strategy(),
        perm_seed in any::<u64>(),
    ) {
        let dims = ModelDims::new(6, 5, 4, 3);
        let weights = init_weights(dims, seed);
        let m = rows.len();
        let bag = Array2::from_shape_fn((m, 6), |(i, j)| rows[i][j]);
        let trace = forward_bag(&weights, &bag.view(), ForwardMode::Eval).unwrap();

        let total: f64 = trace.attention.sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(trace.attention.iter().all(|&a| a > 0.0));

        // Any rotation of the rows preserves logits and permutes attention.
        let shift = (perm_seed as usize) % m;
        let perm: Vec<usize> = (0..m).map(|i| (i + shift) % m).collect();
        let permuted = Array2::from_shape_fn((m, 6), |(i, j)| bag[[perm[i], j]]);
        let tp = forward_bag(&weights, &permuted.view(), ForwardMode::Eval).unwrap();
        for (a, b) in trace.logits.iter().zip(tp.logits.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        for i in 0..m {
            prop_assert!((trace.attention[perm[i]] - tp.attention[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn discrete_survival_distribution_sums_to_one(
        logits in prop::collection::vec(-6.0..6.0f64, 4usize),
    ) {
        let s = Array1::from_vec(logits);
        let h = hazards(&s.view());
        let surv = survival_curve(&h.view());
        let mass: f64 = (0..4).map(|r| h[r] * surv[r]).sum::<f64>() + surv[4];
        prop_assert!((mass - 1.0).abs() < 1e-9);
    }

    #[test]
    fn survival_nll_is_finite_and_nonnegative(
        logits in prop::collection::vec(-10.0..10.0f64, 4usize),
        bin in 0usize..4,
        censored in any::<bool>(),
    ) {
        let s = Array1::from_vec(logits);
        let label = SurvivalLabel { bin, censored, time: 1.0 };
        let loss = survival_nll(&s.view(), &label).unwrap();
        prop_assert!(loss.value.is_finite());
        prop_assert!(loss.value >= 0.0);
        prop_assert!(loss.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn auc_matches_pairwise_oracle(
        raw in prop::collection::vec((0u8..8, any::<bool>()), 4..120usize),
    ) {
        let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 7.0).collect();
        let mut labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
        labels[0] = true;
        let last = labels.len() - 1;
        labels[last] = false;

        let mut concordant = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            if !labels[i] { continue; }
            for j in 0..scores.len() {
                if labels[j] { continue; }
                pairs += 1.0;
                concordant += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
        prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), concordant / pairs);
    }

    #[test]
    fn c_index_is_invariant_under_strictly_increasing_transforms(
        raw in prop::collection::vec((-4.0..4.0f64, 1u8..30, any::<bool>()), 3..60usize),
    ) {
        let risks: Vec<f64> = raw.iter().map(|r| r.0).collect();
        let times: Vec<f64> = raw.iter().map(|r| r.1 as f64).collect();
        let censored: Vec<bool> = raw.iter().map(|r| r.2).collect();
        let transformed: Vec<f64> = risks.iter().map(|r| r.exp() + 2.0 * r).collect();
        match c_index(&risks, &times, &censored) {
            Ok(base) => {
                let same = c_index(&transformed, &times, &censored).unwrap();
                prop_assert!((base - same).abs() < 1e-12);
            }
            Err(_) => {
                prop_assert!(c_index(&transformed, &times, &censored).is_err());
            }
        }
    }

    #[test]
    fn log_rank_p_in_unit_interval_and_symmetric(
        raw in prop::collection::vec((1u8..30, any::<bool>(), any::<bool>()), 6..50usize),
    ) {
        let times: Vec<f64> = raw.iter().map(|r| r.0 as f64).collect();
        let mut censored: Vec<bool> = raw.iter().map(|r| r.1).collect();
        censored[0] = false;
        let mut group: Vec<bool> = raw.iter().map(|r| r.2).collect();
        group[0] = true;
        let last = group.len() - 1;
        group[last] = false;

        let (stat, p) = log_rank(&times, &censored, &group).unwrap();
        prop_assert!(stat >= 0.0);
        prop_assert!(p > 0.0 && p <= 1.0);

        let flipped: Vec<bool> = group.iter().map(|g| !g).collect();
        let (stat2, p2) = log_rank(&times, &censored, &flipped).unwrap();
        prop_assert!((stat - stat2).abs() < 1e-9);
        prop_assert!((p - p2).abs() < 1e-9);
    }
}
