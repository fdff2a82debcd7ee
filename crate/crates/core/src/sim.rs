//! Simulation design with two uniform covariates and the Monte Carlo harness.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::EstimatorConfig;
use crate::data::{ObservedDataset, OutcomeKind};
use crate::em::{deviation_flags, run_em, EmInit, FoldAssignment};
use crate::error::{Error, Result};
use crate::estimators::{estimate_ate, moment_plugin_estimate, naive_estimate, oracle_estimate};
use crate::nuisance::{NuisanceSet, UnitNuisance};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimOutcome {
    Binary,
    Continuous,
}

impl SimOutcome {
    pub fn kind(&self) -> OutcomeKind {
        match self {
            SimOutcome::Binary => OutcomeKind::Binary,
            SimOutcome::Continuous => OutcomeKind::Continuous,
        }
    }
}

fn expit(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// True nuisances at covariate value `(x1, x2)`.
pub fn true_nuisance(outcome: SimOutcome, x1: f64, x2: f64) -> UnitNuisance {
    let pi = 1.0 / (1.0 + (-x1).exp() + (-x2).exp());
    let outcome_mean = match outcome {
        SimOutcome::Binary => [expit(1.0 - 2.0 * x1 + 0.5 * x2), expit(-2.0 + 0.5 * x1 + x2)],
        SimOutcome::Continuous => {
            let base = (std::f64::consts::PI * x1).sin();
            [base - 0.5 * (x1 + x2), base + 0.5 * (x1 + x2)]
        }
    };
    UnitNuisance {
        propensity: pi,
        surrogate: [expit(-1.0 + 0.5 * x1 - x2), expit(1.0 + 2.0 * x1)],
        proxy: [expit(2.0 + x1), expit(-1.0 - x1 + 0.5 * x2)],
        outcome: outcome_mean,
    }
}

/// One simulated sample with its latent treatment and true nuisances.
#[derive(Debug, Clone)]
pub struct SimData {
    pub data: ObservedDataset,
    pub latent: Vec<u8>,
    pub truth: NuisanceSet,
}

pub fn generate<R: Rng>(outcome: SimOutcome, n: usize, rng: &mut R) -> Result<SimData> {
    let mut y = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(2 * n);
    let mut latent = Vec::with_capacity(n);
    let mut units = Vec::with_capacity(n);
    for _ in 0..n {
        let x1: f64 = rng.gen();
        let x2: f64 = rng.gen();
        let u = true_nuisance(outcome, x1, x2);
        let s = usize::from(rng.gen::<f64>() < u.propensity);
        a.push(u8::from(rng.gen::<f64>() < u.surrogate[s]));
        z.push(u8::from(rng.gen::<f64>() < u.proxy[s]));
        y.push(match outcome {
            SimOutcome::Binary => f64::from(u8::from(rng.gen::<f64>() < u.outcome[s])),
            SimOutcome::Continuous => u.outcome[s] + rng.sample::<f64, _>(StandardNormal),
        });
        x.push(x1);
        x.push(x2);
        latent.push(s as u8);
        units.push(u);
    }
    Ok(SimData {
        data: ObservedDataset::new(outcome.kind(), y, a, z, x, 2)?,
        latent,
        truth: NuisanceSet::new(units),
    })
}

/// Midpoint rule on the unit square, starting from a 200 x 200 grid and doubling
/// until successive values differ by less than `tol`.
pub fn unit_square_integral(f: impl Fn(f64, f64) -> f64 + Sync, tol: f64) -> f64 {
    let rule = |m: usize| -> f64 {
        let h = 1.0 / m as f64;
        (0..m)
            .into_par_iter()
            .map(|i| {
                let x1 = (i as f64 + 0.5) * h;
                (0..m).map(|j| f(x1, (j as f64 + 0.5) * h)).sum::<f64>()
            })
            .collect::<Vec<f64>>()
            // sequential sum keeps the result independent of the thread count
            .iter()
            .sum::<f64>()
            * h
            * h
    };
    let mut m = 200;
    let mut prev = rule(m);
    loop {
        m *= 2;
        let cur = rule(m);
        if (cur - prev).abs() < tol || m >= 12_800 {
            return cur;
        }
        prev = cur;
    }
}

/// True counterfactual means `[E{Y^(0)}, E{Y^(1)}]`.
pub fn true_psis(outcome: SimOutcome) -> [f64; 2] {
    [0, 1].map(|s| unit_square_integral(|x1, x2| true_nuisance(outcome, x1, x2).outcome[s], 1e-8))
}

/// pr(A = A*) under the design.
pub fn true_concordance() -> f64 {
    unit_square_integral(
        |x1, x2| {
            let u = true_nuisance(SimOutcome::Binary, x1, x2);
            u.propensity * u.surrogate[1] + (1.0 - u.propensity) * (1.0 - u.surrogate[0])
        },
        1e-10,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Proposed,
    Infeasible,
    Naive,
    MomentPlugin,
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Proposed => "proposed",
            EstimatorKind::Infeasible => "infeasible",
            EstimatorKind::Naive => "naive",
            EstimatorKind::MomentPlugin => "moment_plugin",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "proposed" => Ok(Self::Proposed),
            "infeasible" | "oracle" => Ok(Self::Infeasible),
            "naive" => Ok(Self::Naive),
            "moment_plugin" | "moment" => Ok(Self::MomentPlugin),
            other => Err(Error::Validation(format!("unknown estimator '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub outcome: SimOutcome,
    pub n: usize,
    pub runs: usize,
    pub seed: u64,
    pub estimators: Vec<EstimatorKind>,
}

/// Result of one estimator on one replicate: `psi[s]` and, when available, Wald
/// intervals `ci[s]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateEstimate {
    pub estimator: EstimatorKind,
    pub psi: [f64; 2],
    pub ci: Option<[[f64; 2]; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub estimates: Vec<ReplicateEstimate>,
    pub em_iterations: usize,
    pub warnings: Vec<String>,
}

/// Runs every requested estimator on replicate `r`, drawn from stream `(seed, r)`.
pub fn run_replicate(scenario: &Scenario, config: &EstimatorConfig, r: usize) -> Result<ReplicateResult> {
    let mut rng = stream_rng(scenario.seed, r as u64);
    let sim = generate(scenario.outcome, scenario.n, &mut rng)?;
    let folds = FoldAssignment::random(scenario.n, config.folds, &mut rng)?;
    let mut out = ReplicateResult {
        replicate: r,
        estimates: Vec::new(),
        em_iterations: 0,
        warnings: Vec::new(),
    };
    for kind in &scenario.estimators {
        let est = match kind {
            EstimatorKind::Proposed => {
                let (nuis, diag) = run_em(&sim.data, config, &folds, &EmInit::Default, &mut rng)?;
                out.em_iterations = diag.max_iterations();
                out.warnings.extend(diag.warnings);
                let e = estimate_ate(&sim.data, &nuis, config)?;
                ReplicateEstimate {
                    estimator: *kind,
                    psi: [e.psi0.estimate, e.psi1.estimate],
                    ci: Some([e.psi0.ci, e.psi1.ci]),
                }
            }
            EstimatorKind::Infeasible => {
                let e = oracle_estimate(&sim.data, Some(&sim.truth), config)?;
                ReplicateEstimate {
                    estimator: *kind,
                    psi: [e.psi0.estimate, e.psi1.estimate],
                    ci: Some([e.psi0.ci, e.psi1.ci]),
                }
            }
            EstimatorKind::Naive => {
                let e = naive_estimate(&sim.data)?;
                out.warnings.extend(e.warnings);
                ReplicateEstimate {
                    estimator: *kind,
                    psi: [e.psi0, e.psi1],
                    ci: None,
                }
            }
            EstimatorKind::MomentPlugin => {
                let e = moment_plugin_estimate(&sim.data, &folds, config)?;
                if e.excluded > 0 {
                    out.warnings.push(format!("moment plug-in dropped {} units", e.excluded));
                }
                ReplicateEstimate {
                    estimator: *kind,
                    psi: [e.psi0.estimate, e.psi1.estimate],
                    ci: Some([e.psi0.ci, e.psi1.ci]),
                }
            }
        };
        out.estimates.push(est);
    }
    Ok(out)
}

/// Summary of one estimator for one estimand across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub estimator: String,
    pub estimand: String,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    pub bias_x100: f64,
    /// Monte Carlo standard deviation of the estimates.
    pub sd: f64,
    /// Monte Carlo standard error of the bias.
    pub mc_se: f64,
    pub coverage: Option<f64>,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub outcome: SimOutcome,
    pub n: usize,
    pub runs: usize,
    pub seed: u64,
    pub folds: usize,
    pub em_threshold: f64,
    pub psi1_true: f64,
    pub psi0_true: f64,
    pub rows: Vec<McRow>,
    pub failed_runs: usize,
    pub failures: Vec<String>,
    pub status: String,
    pub wall_clock_secs: f64,
    pub em_init: String,
    pub mean_em_iterations: f64,
    #[serde(default)]
    pub deviations: Vec<String>,
    #[serde(skip)]
    pub replicates: Vec<ReplicateResult>,
}

impl McReport {
    pub fn row(&self, estimator: EstimatorKind, estimand: &str) -> Option<&McRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator.name() && r.estimand == estimand)
    }

    pub fn failed(&self) -> bool {
        self.status != "OK"
    }

    /// Plain-text table with bias x 100, its Monte Carlo SE and coverage.
    pub fn text_table(&self) -> String {
        let mut s = format!(
            "{:?} outcome, n = {}, {} runs, {} folds (truth: psi1 = {:.6}, psi0 = {:.6})\n",
            self.outcome, self.n, self.runs, self.folds, self.psi1_true, self.psi0_true
        );
        s.push_str(&format!(
            "{:<14} {:<8} {:>12} {:>10} {:>10} {:>9}\n",
            "estimator", "estimand", "bias x 100", "(se x 100)", "sd", "coverage"
        ));
        for r in &self.rows {
            let cov = r.coverage.map_or("-".to_string(), |c| format!("{:.1}%", 100.0 * c));
            s.push_str(&format!(
                "{:<14} {:<8} {:>12.2} {:>10.2} {:>10.4} {:>9}\n",
                r.estimator,
                r.estimand,
                r.bias_x100,
                100.0 * r.mc_se,
                r.sd,
                cov
            ));
        }
        s.push_str(&format!(
            "status {} ({} failed runs), {:.1} s\n",
            self.status, self.failed_runs, self.wall_clock_secs
        ));
        s
    }
}

/// Fraction of failed replicates above which the run is marked as failed.
pub const FAILURE_LIMIT: f64 = 0.05;

/// Runs all replicates (in parallel on the current rayon pool) and summarises them.
/// Results are identical for any thread count.
pub fn run_monte_carlo(scenario: &Scenario, config: &EstimatorConfig) -> Result<McReport> {
    config.validate()?;
    if scenario.runs == 0 {
        return Err(Error::Validation("need at least one run".into()));
    }
    let start = Instant::now();
    let truth = true_psis(scenario.outcome);
    let results: Vec<std::result::Result<ReplicateResult, String>> = (0..scenario.runs)
        .into_par_iter()
        .map(|r| run_replicate(scenario, config, r).map_err(|e| format!("run {r}: {e}")))
        .collect();
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => failures.push(e),
        }
    }
    let mut rows = Vec::new();
    for kind in &scenario.estimators {
        for (s, name) in [(1usize, "psi1"), (0, "psi0")] {
            let vals: Vec<(f64, Option<[f64; 2]>)> = ok
                .iter()
                .filter_map(|rep| rep.estimates.iter().find(|e| e.estimator == *kind))
                .map(|e| (e.psi[s], e.ci.map(|c| c[s])))
                .collect();
            if vals.is_empty() {
                continue;
            }
            let m = vals.len() as f64;
            let mean = vals.iter().map(|v| v.0).sum::<f64>() / m;
            let sd = if vals.len() > 1 {
                (vals.iter().map(|v| (v.0 - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
            } else {
                0.0
            };
            // Coverage is reported for the proposed estimator only.
            let coverage = if *kind == EstimatorKind::Proposed && vals.iter().all(|v| v.1.is_some()) {
                Some(
                    vals.iter()
                        .filter(|v| {
                            let c = v.1.unwrap();
                            c[0] <= truth[s] && truth[s] <= c[1]
                        })
                        .count() as f64
                        / m,
                )
            } else {
                None
            };
            rows.push(McRow {
                estimator: kind.name().into(),
                estimand: name.into(),
                truth: truth[s],
                mean,
                bias: mean - truth[s],
                bias_x100: 100.0 * (mean - truth[s]),
                sd,
                mc_se: sd / m.sqrt(),
                coverage,
                runs: vals.len(),
            });
        }
    }
    let failed = failures.len();
    let status = if failed as f64 > FAILURE_LIMIT * scenario.runs as f64 {
        "FAILED"
    } else {
        "OK"
    };
    let iters: Vec<f64> = ok.iter().map(|r| r.em_iterations as f64).collect();
    Ok(McReport {
        outcome: scenario.outcome,
        n: scenario.n,
        runs: scenario.runs,
        seed: scenario.seed,
        folds: config.folds,
        em_threshold: config.em_threshold,
        psi1_true: truth[1],
        psi0_true: truth[0],
        rows,
        failed_runs: failed,
        failures,
        status: status.into(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        em_init: "prior 1/2; surrogate 1/2 -/+ u, u ~ U(0.1, 0.3); proxy and outcome at smoothed marginals".into(),
        mean_em_iterations: if iters.is_empty() { 0.0 } else { iters.iter().sum::<f64>() / iters.len() as f64 },
        deviations: deviation_flags(scenario.outcome.kind()),
        replicates: ok,
    })
}
