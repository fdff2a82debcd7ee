mod common;

use common::{functional_gaps, influence_scale, m_weight_error, mean_influence, perturb, stratum_nuisance, INSIDE, OUTSIDE};
use hidtreat::estimators::{floor_signed, m_weight, score};
use hidtreat::rng::stream_rng;
use hidtreat::{OutcomeKind, UnitNuisance};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn m_weight_is_unbiased_for_the_indicator(seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 0);
        let law = common::random_law(&mut rng, OutcomeKind::Binary, 3);
        prop_assert!(m_weight_error(&law) < 1e-12);
    }

    #[test]
    fn mean_influence_vanishes_in_each_robustness_pattern(seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 1);
        let law = common::random_law(&mut rng, OutcomeKind::Categorical(3), 2);
        for w in INSIDE {
            let nuis: Vec<UnitNuisance> = law.strata.iter().map(|st| {
                let d: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.1..0.3) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
                perturb(&stratum_nuisance(law.kind, st), w, d)
            }).collect();
            for s in 0..2 {
                // perturbed proxy or surrogate pairs can nearly coincide and inflate the weights
                let tol = 1e-12 * influence_scale(&law, &nuis, s).max(1.0);
                prop_assert!(mean_influence(&law, &nuis, s).abs() < tol);
            }
        }
    }

    #[test]
    fn functional_influence_functions_match_their_full_data_versions(seed in any::<u64>(), k in 2usize..5) {
        let mut rng = stream_rng(seed, 2);
        let kind = if k == 2 { OutcomeKind::Binary } else { OutcomeKind::Categorical(k) };
        let law = common::random_law(&mut rng, kind, 2);
        for g in functional_gaps(&law) {
            prop_assert!(g < 1e-12, "gaps {:?}", functional_gaps(&law));
        }
    }

    #[test]
    fn flooring_keeps_sign_and_size(x in -1.0f64..1.0, eps in 0.0f64..0.1) {
        let (v, t) = floor_signed(x, eps);
        prop_assert!(v.abs() >= eps);
        prop_assert_eq!(t, x.abs() < eps);
        prop_assert!(v * x >= 0.0);
    }
}

#[test]
fn wrong_surrogate_and_outcome_models_bias_the_mean() {
    let mut rng = stream_rng(7, 0);
    let law = common::random_law(&mut rng, OutcomeKind::Binary, 1);
    let nuis = vec![perturb(&stratum_nuisance(law.kind, &law.strata[0]), OUTSIDE[0], [0.0, 0.2, 0.0, 0.2])];
    assert!(mean_influence(&law, &nuis, 1).abs() > 1e-3);
}

#[test]
fn m_weight_fixture() {
    let u = UnitNuisance {
        propensity: 0.4,
        surrogate: [0.2, 0.8],
        proxy: [0.9, 0.3],
        outcome: [0.3, 0.7],
    };
    // M_A = (1 - 0.2) / 0.6, M_Z = (0 - 0.9) / (0.3 - 0.9)
    let w = m_weight(1, 0, &u, 1, 0.01);
    assert!((w.m_a - 4.0 / 3.0).abs() < 1e-14);
    assert!((w.m_z - 1.5).abs() < 1e-14);
    assert!((w.m - 2.0).abs() < 1e-14);
    // S_1 = 2 (1 - 0.7) / 0.4 + 0.7
    let (s, trimmed) = score(1.0, 1, 0, &u, 1, 0.01);
    assert!((s - 2.2).abs() < 1e-14);
    assert!(!trimmed);
}

#[test]
fn near_equal_surrogate_arms_are_floored() {
    let u = UnitNuisance {
        propensity: 0.5,
        surrogate: [0.500, 0.505],
        proxy: [0.2, 0.8],
        outcome: [0.0, 1.0],
    };
    let w = m_weight(1, 1, &u, 1, 0.01);
    assert!(w.trimmed);
    assert!((w.m_a - 0.5 / 0.01).abs() < 1e-12);
}
