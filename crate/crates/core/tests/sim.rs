use hidtreat::rng::stream_rng;
use hidtreat::sim::{
    generate, run_monte_carlo, run_replicate, true_nuisance, true_psis, unit_square_integral, EstimatorKind, Scenario,
    SimOutcome,
};
use hidtreat::EstimatorConfig;
use rand::Rng;

#[test]
fn quadrature_agrees_with_monte_carlo() {
    let truth = true_psis(SimOutcome::Binary);
    let mut rng = stream_rng(1, 0);
    let draws = 10_000_000;
    for s in 0..2 {
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..draws {
            let v = true_nuisance(SimOutcome::Binary, rng.gen(), rng.gen()).outcome[s];
            sum += v;
            sq += v * v;
        }
        let mean = sum / draws as f64;
        let se = ((sq / draws as f64 - mean * mean) / draws as f64).sqrt();
        assert!((mean - truth[s]).abs() < 4.0 * se, "{mean} {} {se}", truth[s]);
    }
}

#[test]
fn continuous_contrast_is_one() {
    let t = true_psis(SimOutcome::Continuous);
    assert!((t[1] - t[0] - 1.0).abs() < 1e-8);
    let area = unit_square_integral(|a, b| a * b, 1e-12);
    assert!((area - 0.25).abs() < 1e-12);
}

#[test]
fn simulated_covariates_and_latent_shares() {
    let mut rng = stream_rng(2, 0);
    let sim = generate(SimOutcome::Binary, 20_000, &mut rng).unwrap();
    assert!(sim.data.x().iter().all(|&v| (0.0..1.0).contains(&v)));
    let agree = sim.latent.iter().zip(sim.data.a()).filter(|(s, a)| s == a).count() as f64 / 20_000.0;
    assert!((agree - 0.82).abs() < 0.02);
}

fn small(outcome: SimOutcome, runs: usize) -> Scenario {
    Scenario {
        outcome,
        n: 200,
        runs,
        seed: 99,
        estimators: vec![EstimatorKind::Proposed, EstimatorKind::Infeasible, EstimatorKind::Naive],
    }
}

#[test]
fn one_run_bias_is_estimate_minus_truth() {
    let sc = small(SimOutcome::Binary, 1);
    let config = EstimatorConfig::default();
    let rep = run_monte_carlo(&sc, &config).unwrap();
    let single = run_replicate(&sc, &config, 0).unwrap();
    for e in &single.estimates {
        let row = rep.row(e.estimator, "psi1").unwrap();
        assert_eq!(row.bias, e.psi[1] - rep.psi1_true);
        assert_eq!(row.runs, 1);
    }
}

#[test]
fn reports_are_reproducible() {
    let sc = small(SimOutcome::Continuous, 4);
    let config = EstimatorConfig::default();
    let mut a = run_monte_carlo(&sc, &config).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let mut b = pool.install(|| run_monte_carlo(&sc, &config)).unwrap();
    a.wall_clock_secs = 0.0;
    b.wall_clock_secs = 0.0;
    assert_eq!(a, b);
    assert_eq!(a.replicates, b.replicates);
    assert!(a.text_table().contains("bias x 100"));
}

#[test]
fn zero_runs_are_rejected() {
    assert!(run_monte_carlo(&small(SimOutcome::Binary, 0), &EstimatorConfig::default()).is_err());
}

#[test]
fn moment_plugin_is_less_accurate_than_em() {
    let truth = true_psis(SimOutcome::Binary)[1];
    let sc = Scenario {
        outcome: SimOutcome::Binary,
        n: 2000,
        runs: 50,
        seed: 2024,
        estimators: vec![EstimatorKind::Proposed, EstimatorKind::MomentPlugin],
    };
    let config = EstimatorConfig::default();
    let mut worse = 0;
    for r in 0..sc.runs {
        let rep = run_replicate(&sc, &config, r).unwrap();
        let err = |k: EstimatorKind| {
            let e = rep.estimates.iter().find(|e| e.estimator == k).unwrap();
            (e.psi[1] - truth).abs()
        };
        if err(EstimatorKind::MomentPlugin) > err(EstimatorKind::Proposed) {
            worse += 1;
        }
    }
    assert!(worse as f64 >= 0.6 * sc.runs as f64, "moment plug-in worse in {worse} of {} runs", sc.runs);
}
