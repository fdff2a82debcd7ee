use hidtreat::kernel::{nw_regress, silverman_bandwidth, ConditionalDensity, KernelModel};
use hidtreat::rng::stream_rng;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

/// Column with sample standard deviation exactly `sd`.
fn spread(n: usize, sd: f64) -> Vec<f64> {
    let c = sd * ((n as f64 - 1.0) / n as f64).sqrt();
    (0..n).map(|i| if i % 2 == 0 { c } else { -c }).collect()
}

#[test]
fn rule_of_thumb_bandwidth_fixtures() {
    let h = silverman_bandwidth(&spread(32, 1.0), 32, 1).unwrap();
    assert!((h - 0.53).abs() < 1e-12);
    let col = spread(10_000, 0.5);
    let x: Vec<f64> = col.iter().flat_map(|&v| [v, -v]).collect();
    let h = silverman_bandwidth(&x, 10_000, 2).unwrap();
    // 1.06 * 0.5 * 10^(-4/6)
    assert!((h - 0.114_185_038_6).abs() < 1e-9, "{h}");
}

#[test]
fn constant_covariate_has_no_bandwidth() {
    let x = vec![3.0; 20];
    assert!(silverman_bandwidth(&x, 20, 1).is_err());
}

#[test]
fn single_training_point_is_returned_everywhere() {
    let m = KernelModel::new(vec![0.3], 1, vec![7.5], 0.2).unwrap();
    let fit = nw_regress(&m, &[-1.0, 0.3, 2.0], 3);
    assert!(fit.values.iter().all(|&v| v == 7.5));
}

#[test]
fn symmetric_pair_gives_midpoint() {
    let m = KernelModel::new(vec![0.0, 1.0], 1, vec![0.0, 1.0], 1.0).unwrap();
    let fit = nw_regress(&m, &[0.5], 1);
    assert!((fit.values[0] - 0.5).abs() < 1e-15);
}

#[test]
fn far_queries_fall_back_to_nearest_neighbour() {
    let m = KernelModel::new(vec![0.0, 1.0], 1, vec![2.0, 5.0], 1e-3).unwrap();
    let fit = nw_regress(&m, &[40.0], 1);
    assert_eq!(fit.values[0], 5.0);
    assert_eq!(fit.fallbacks, 1);
}

#[test]
fn t_and_s_learners_use_the_right_inputs() {
    let x = [0.0, 0.1, 0.2, 0.3];
    let t = KernelModel::t_learner(&x, 1, &[0, 1, 0, 1], 1, &[1.0, 2.0, 3.0, 4.0], 0.5).unwrap();
    let fit = nw_regress(&t, &[0.2], 1);
    assert!(fit.values[0] > 2.0 && fit.values[0] < 4.0);
    let s = KernelModel::s_learner(&x, 1, &[5.0, 6.0, 7.0, 8.0], &[1.0, 2.0, 3.0, 4.0], 0.5).unwrap();
    assert_eq!(s.dim(), 2);
}

#[test]
fn conditional_density_fixtures() {
    let mut rng = stream_rng(3, 0);
    let n = 4000;
    let y: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let x: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let cd = ConditionalDensity::fit(x, y, 1, 1.0).unwrap();
    assert!((cd.density(0.0, &[0.5]) - 0.398_942_3).abs() < 0.03);
    // integrates to one
    let step = 0.01;
    let total: f64 = (-800..800).map(|k| cd.density(k as f64 * step, &[0.5]) * step).sum();
    assert!((total - 1.0).abs() < 1e-3);
    let one = ConditionalDensity::new(vec![0.0], vec![1.0], 1, 0.5, 0.25).unwrap();
    let peak = 1.0 / (0.25 * (2.0 * std::f64::consts::PI).sqrt());
    assert!((one.density(1.0, &[0.0]) - peak).abs() < 1e-12);
}

proptest! {
    #[test]
    fn regression_properties(
        pts in prop::collection::vec((-2.0f64..2.0, -5.0f64..5.0), 2..20),
        q in -2.0f64..2.0,
        c in -3.0f64..3.0,
        h in 0.1f64..2.0,
    ) {
        let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let t: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let base = nw_regress(&KernelModel::new(x.clone(), 1, t.clone(), h).unwrap(), &[q], 1).values[0];

        // constant targets
        let flat = nw_regress(&KernelModel::new(x.clone(), 1, vec![c; t.len()], h).unwrap(), &[q], 1).values[0];
        prop_assert!((flat - c).abs() < 1e-12);

        // scaling targets
        let ts: Vec<f64> = t.iter().map(|v| v * c).collect();
        let scaled = nw_regress(&KernelModel::new(x.clone(), 1, ts, h).unwrap(), &[q], 1).values[0];
        prop_assert!((scaled - c * base).abs() < 1e-10 * (1.0 + base.abs() * c.abs()));

        // permutation of training rows
        let (xr, tr): (Vec<f64>, Vec<f64>) = x.iter().rev().zip(t.iter().rev()).map(|(a, b)| (*a, *b)).unzip();
        let perm = nw_regress(&KernelModel::new(xr, 1, tr, h).unwrap(), &[q], 1).values[0];
        prop_assert!((perm - base).abs() < 1e-12 * (1.0 + base.abs()));

        // huge bandwidth gives the target mean
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        let wide = nw_regress(&KernelModel::new(x, 1, t, 1e6).unwrap(), &[q], 1).values[0];
        prop_assert!((wide - mean).abs() < 1e-9);

        // convex combination
        let (lo, hi) = pts.iter().fold((f64::MAX, f64::MIN), |(l, u), p| (l.min(p.1), u.max(p.1)));
        prop_assert!(base >= lo - 1e-12 && base <= hi + 1e-12);
    }
}
