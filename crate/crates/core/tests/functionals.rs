mod common;

use hidtreat::estimators::estimate_ate;
use hidtreat::functionals::{
    estimate_ett, estimate_msm, estimate_qte, estimate_semilinear, ett_if, m_pair, msm_if, qte_if, semilinear_if, Link,
};
use hidtreat::law::{DiscreteLaw, StratumLaw};
use hidtreat::nuisance::NuisanceSet;
use hidtreat::rng::stream_rng;
use hidtreat::{EstimatorConfig, ObservedDataset, OutcomeKind, UnitNuisance};

fn cfg() -> EstimatorConfig {
    EstimatorConfig::default()
}

/// Two strata with the same effect 0.3 on a binary outcome.
fn constant_effect_law() -> DiscreteLaw {
    let a = StratumLaw::binary(vec![0.0], 0.3, [0.2, 0.5], [0.25, 0.8], [0.85, 0.3]);
    let b = StratumLaw::binary(vec![1.0], 0.6, [0.4, 0.7], [0.15, 0.7], [0.8, 0.2]);
    DiscreteLaw::new(OutcomeKind::Binary, vec![a, b], vec![0.5, 0.5]).unwrap()
}

/// Population mean of a scalar influence function under the observed-data law.
fn population_mean(law: &DiscreteLaw, f: impl Fn(usize, f64, u8, u8) -> f64) -> f64 {
    law.strata
        .iter()
        .enumerate()
        .map(|(j, st)| law.stratum_weights[j] * common::latent_sum(st, |r, a, z, _| f(j, law.kind.level_value(r), a, z)))
        .sum()
}

#[test]
fn influence_functions_have_mean_zero_at_the_truth() {
    let mut rng = stream_rng(1, 0);
    for _ in 0..100 {
        let law = common::random_law(&mut rng, OutcomeKind::Categorical(3), 2);
        let nu: Vec<UnitNuisance> = law.strata.iter().map(|st| common::stratum_nuisance(law.kind, st)).collect();
        let p1: f64 = law.strata.iter().zip(&law.stratum_weights).map(|(s, w)| w * s.pi).sum();
        let ett: f64 = law
            .strata
            .iter()
            .zip(&law.stratum_weights)
            .zip(&nu)
            .map(|((s, w), u)| w * s.pi * (u.outcome[1] - u.outcome[0]))
            .sum::<f64>()
            / p1;
        let m = population_mean(&law, |j, y, a, z| ett_if(y, m_pair(a, z, &nu[j], 0.0), &nu[j], ett, p1));
        assert!(m.abs() < 1e-12);

        // median of Y^(1): the level where the true cdf first reaches 1/2; the
        // estimating function is evaluated at its own population quantity.
        let cdf = |t: usize| -> f64 {
            law.strata.iter().zip(&law.stratum_weights).map(|(s, w)| w * (0..=t).map(|q| s.p_y[q][1]).sum::<f64>()).sum()
        };
        let gamma = cdf(1);
        let m = population_mean(&law, |j, y, a, z| {
            let eta1: f64 = (0..=1).map(|q| law.strata[j].p_y[q][1]).sum();
            qte_if(y, m_pair(a, z, &nu[j], 0.0), &nu[j], 1, 2.0, eta1, gamma)
        });
        assert!(m.abs() < 1e-12);

        // structural model at its population least-squares coefficients
        let v: Vec<[f64; 1]> = law.strata.iter().map(|s| [s.x[0]]).collect();
        let beta = msm_truth(&law, &nu);
        for c in 0..3 {
            let m = population_mean(&law, |j, y, a, z| {
                msm_if(y, m_pair(a, z, &nu[j], 0.0), &nu[j], &v[j], &beta, Link::Identity)[c]
            });
            assert!(m.abs() < 1e-12);
        }
    }
}

/// Identity-link structural model with regressors (1, s, x) fitted by least squares
/// to the true conditional means of each stratum.
fn msm_truth(law: &DiscreteLaw, nu: &[UnitNuisance]) -> Vec<f64> {
    // normal equations sum_j w_j sum_s h h' beta = sum_j w_j sum_s h mu_s
    let mut xtx = nalgebra::DMatrix::<f64>::zeros(3, 3);
    let mut xty = nalgebra::DVector::<f64>::zeros(3);
    for (j, st) in law.strata.iter().enumerate() {
        for s in 0..2 {
            let h = nalgebra::DVector::from_vec(vec![1.0, s as f64, st.x[0]]);
            xtx += law.stratum_weights[j] * &h * h.transpose();
            xty += law.stratum_weights[j] * nu[j].outcome[s] * &h;
        }
    }
    xtx.lu().solve(&xty).unwrap().iter().copied().collect()
}

#[test]
fn ett_is_close_to_the_effect_under_a_constant_effect() {
    let law = constant_effect_law();
    let mut rng = stream_rng(2, 0);
    let (data, _, truth) = common::sample_with_truth(&law, 10_000, &mut rng);
    let e = estimate_ett(&data, &truth, &cfg()).unwrap();
    assert!((e.estimate - 0.3).abs() < 3.0 * e.se, "{} {}", e.estimate, e.se);
}

#[test]
fn semilinear_effect_and_its_invariance() {
    let law = constant_effect_law();
    let mut rng = stream_rng(3, 0);
    let (data, _, truth) = common::sample_with_truth(&law, 10_000, &mut rng);
    let e = estimate_semilinear(&data, &truth, None, &cfg()).unwrap();
    assert!((e.estimate - 0.3).abs() < 3.0 * e.se);

    // Y + g(X) with b(X) moved by g leaves the estimate unchanged.
    let g = |x: f64| 2.0 * x - 0.7;
    let y: Vec<f64> = (0..data.n()).map(|i| data.y()[i] + g(data.x_row(i)[0])).collect();
    let shifted = data.with_outcome(OutcomeKind::Continuous, y).unwrap();
    let mut t2 = NuisanceSet::new(truth.units.clone());
    for (i, u) in t2.units.iter_mut().enumerate() {
        let gx = g(data.x_row(i)[0]);
        u.outcome = [u.outcome[0] + gx, u.outcome[1] + gx];
    }
    let e2 = estimate_semilinear(&shifted, &t2, None, &cfg()).unwrap();
    assert!((e2.estimate - e.estimate).abs() < 1e-10);

    let zeros = vec![0.0; data.n()];
    assert!(matches!(
        estimate_semilinear(&data, &truth, Some(&zeros), &cfg()),
        Err(hidtreat::Error::Solve(_))
    ));
}

#[test]
fn semilinear_influence_fixture() {
    let u = UnitNuisance {
        propensity: 0.25,
        surrogate: [0.2, 0.8],
        proxy: [0.9, 0.3],
        outcome: [1.0, 3.0],
    };
    // h { w1 (Y - beta - b)(1 - pi) - w0 (Y - b) pi } with w = (0, 1), Y = 4, beta = 2
    assert!((semilinear_if(4.0, [0.0, 1.0], &u, 2.0, 2.0) - 2.0 * 1.0 * 0.75).abs() < 1e-15);
}

#[test]
fn quantile_of_a_discrete_outcome() {
    let mut rng = stream_rng(4, 0);
    let law = common::random_law(&mut rng, OutcomeKind::Categorical(4), 2);
    let (data, _, truth) = common::sample_with_truth(&law, 20_000, &mut rng);
    for arm in 0..2 {
        // true cdf of Y^(arm) at each level; target a level whose cdf is far from gamma
        let cdf: Vec<f64> = (0..4)
            .map(|t| {
                law.strata.iter().zip(&law.stratum_weights).map(|(s, w)| w * (0..=t).map(|q| s.p_y[q][arm]).sum::<f64>()).sum()
            })
            .collect();
        let gamma = 0.5;
        let want = (0..4).find(|&t| cdf[t] >= gamma).unwrap();
        if cdf.iter().any(|c| (c - gamma).abs() < 0.03) {
            continue;
        }
        let q = estimate_qte(&data, &truth, gamma, arm, &cfg()).unwrap();
        assert_eq!(q.theta, (want + 1) as f64);
    }
    // a tiny level sits at the smallest outcome
    let q = estimate_qte(&data, &truth, 1e-9, 1, &cfg()).unwrap();
    assert!(q.boundary);
    assert_eq!(q.theta, 1.0);
    assert!(estimate_qte(&data, &truth, 1.5, 1, &cfg()).is_err());
    let plain = NuisanceSet::new(truth.units.clone());
    assert!(estimate_qte(&data, &plain, 0.5, 1, &cfg()).is_err());
}

#[test]
fn structural_model_with_identity_link_reproduces_the_contrast() {
    let mut rng = stream_rng(5, 0);
    let law = common::random_law(&mut rng, OutcomeKind::Binary, 2);
    let (data, _, truth) = common::sample_with_truth(&law, 5000, &mut rng);
    let ate = estimate_ate(&data, &truth, &cfg()).unwrap();
    let msm = estimate_msm(&data, &truth, &[], Link::Identity, &cfg()).unwrap();
    assert!((msm.beta[1] - ate.ate.estimate).abs() < 1e-8);
    assert!((msm.beta[0] - ate.psi0.estimate).abs() < 1e-8);

    let logit = estimate_msm(&data, &truth, &[], Link::Logit, &cfg()).unwrap();
    let lg = |p: f64| (p / (1.0 - p)).ln();
    assert!((logit.beta[0] - lg(ate.psi0.estimate)).abs() < 1e-8);
    assert!((logit.beta[1] - (lg(ate.psi1.estimate) - lg(ate.psi0.estimate))).abs() < 1e-8);
    let true_beta1 = lg(law.counterfactual_mean(1)) - lg(law.counterfactual_mean(0));
    assert!((logit.beta[1] - true_beta1).abs() < 3.0 * logit.se[1]);

    // covariate column out of range
    assert!(estimate_msm(&data, &truth, &[3], Link::Identity, &cfg()).is_err());
}

#[test]
fn structural_model_with_all_ones_fails() {
    let n = 50;
    let u = UnitNuisance {
        propensity: 0.4,
        surrogate: [0.2, 0.8],
        proxy: [0.9, 0.3],
        outcome: [1.0, 1.0],
    };
    let data = ObservedDataset::new(
        OutcomeKind::Binary,
        vec![1.0; n],
        (0..n).map(|i| (i % 2) as u8).collect(),
        (0..n).map(|i| ((i / 2) % 2) as u8).collect(),
        vec![],
        0,
    )
    .unwrap();
    let r = estimate_msm(&data, &NuisanceSet::new(vec![u; n]), &[], Link::Logit, &cfg());
    assert!(matches!(r, Err(hidtreat::Error::Solve(_))), "{r:?}");
}

#[test]
fn ett_needs_both_classes() {
    let u = UnitNuisance {
        propensity: 1.0,
        surrogate: [0.2, 0.8],
        proxy: [0.9, 0.3],
        outcome: [0.3, 0.7],
    };
    let data = ObservedDataset::new(OutcomeKind::Binary, vec![1.0, 0.0], vec![1, 0], vec![0, 1], vec![], 0).unwrap();
    let r = estimate_ett(&data, &NuisanceSet::new(vec![u; 2]), &cfg());
    assert!(matches!(r, Err(hidtreat::Error::Validation(_))));
}

#[test]
fn population_quantile_equation_is_the_shifted_cdf() {
    let mut rng = stream_rng(12, 0);
    for _ in 0..50 {
        let law = common::random_law(&mut rng, OutcomeKind::Categorical(4), 3);
        let nu: Vec<UnitNuisance> = law.strata.iter().map(|st| common::stratum_nuisance(law.kind, st)).collect();
        for arm in 0..2 {
            let gamma = 0.4;
            let mut prev = f64::NEG_INFINITY;
            for t in 0..4 {
                let theta = law.kind.level_value(t);
                let m = population_mean(&law, |j, y, a, z| {
                    let eta1: f64 = (0..=t).map(|q| law.strata[j].p_y[q][arm]).sum();
                    qte_if(y, m_pair(a, z, &nu[j], 0.0), &nu[j], arm, theta, eta1, gamma)
                });
                let cdf: f64 = law
                    .strata
                    .iter()
                    .zip(&law.stratum_weights)
                    .map(|(s, w)| w * (0..=t).map(|q| s.p_y[q][arm]).sum::<f64>())
                    .sum();
                assert!((m - (cdf - gamma)).abs() < 1e-12);
                assert!(m >= prev);
                prev = m;
            }
        }
    }
}
