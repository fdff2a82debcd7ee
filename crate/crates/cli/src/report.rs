//! Report documents written by the command-line tool.

use hidtreat::efficiency::EfficiencyReport;
use hidtreat::em::EmDiagnostics;
use hidtreat::ident::SampleStratum;
use hidtreat::sim::McReport;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateLine {
    pub estimand: String,
    pub estimate: f64,
    /// Missing when the sample is too small.
    pub se: Option<f64>,
    pub ci: Option<[f64; 2]>,
}

impl EstimateLine {
    pub fn new(estimand: &str, estimate: f64, se: f64, ci: Option<[f64; 2]>) -> Self {
        Self {
            estimand: estimand.into(),
            estimate,
            se: se.is_finite().then_some(se),
            ci: ci.filter(|c| c.iter().all(|v| v.is_finite())),
        }
    }
}

/// EM bookkeeping summed over folds and repeats.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EmSummary {
    pub fits: usize,
    pub max_iterations: usize,
    pub all_converged: bool,
    pub restarts: usize,
    pub clamped: usize,
    pub kernel_fallbacks: usize,
    pub relabeled_folds: usize,
}

impl EmSummary {
    pub fn add(&mut self, d: &EmDiagnostics) {
        if self.fits == 0 {
            self.all_converged = true;
        }
        self.fits += d.iterations.len();
        self.max_iterations = self.max_iterations.max(d.max_iterations());
        self.all_converged &= d.converged.iter().all(|&c| c);
        self.restarts += d.restarts;
        self.clamped += d.clamped;
        self.kernel_fallbacks += d.kernel_fallbacks;
        self.relabeled_folds += d.relabeled_folds;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationReport {
    pub report: String,
    pub input: String,
    pub n: usize,
    pub d: usize,
    pub outcome: String,
    pub functional: String,
    pub condition: String,
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
    pub em_threshold: f64,
    pub trim_epsilon: f64,
    pub gamma: Option<f64>,
    pub arm: Option<usize>,
    pub link: Option<String>,
    pub msm_v: Vec<usize>,
    /// The quantile search stopped at the smallest outcome in some repeat.
    pub boundary: Option<bool>,
    pub relevance_determinant: f64,
    pub estimates: Vec<EstimateLine>,
    pub efficiency: Option<Vec<EfficiencyReport>>,
    pub em: EmSummary,
    pub deviations: Vec<String>,
    pub warnings: Vec<String>,
}

impl EstimationReport {
    pub fn text(&self) -> String {
        let mut s = format!(
            "{} on {} ({} units, {} covariates, {} outcome), {} folds x {} repeats\n",
            self.functional, self.input, self.n, self.d, self.outcome, self.folds, self.repeats
        );
        s.push_str(&format!("{:<14} {:>12} {:>10} {:>24}\n", "estimand", "estimate", "se", "95% CI"));
        for e in &self.estimates {
            let se = e.se.map_or("-".into(), |v| format!("{v:.5}"));
            let ci = e.ci.map_or("-".into(), |c| format!("[{:.5}, {:.5}]", c[0], c[1]));
            s.push_str(&format!("{:<14} {:>12.5} {:>10} {:>24}\n", e.estimand, e.estimate, se, ci));
        }
        if let Some(eff) = &self.efficiency {
            s.push_str("one-step efficient update\n");
            for r in eff {
                s.push_str(&format!(
                    "{:<14} {:>12.5} {:>10.5}   basis {} , var {:.4} -> {:.4}\n",
                    r.estimand, r.psi_onestep, r.se_onestep, r.basis_dim, r.var_phi, r.var_phi_eff
                ));
            }
        }
        for d in &self.deviations {
            s.push_str(&format!("note: {d}\n"));
        }
        for w in &self.warnings {
            s.push_str(&format!("warning: {w}\n"));
        }
        s
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationReport {
    pub report: String,
    pub reports: Vec<McReport>,
}

impl SimulationReport {
    pub fn text(&self) -> String {
        self.reports.iter().map(|r| r.text_table()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentificationReport {
    pub report: String,
    pub input: String,
    pub n: usize,
    pub outcome: String,
    /// Outcome value of each level index.
    pub levels: Vec<f64>,
    pub condition: String,
    pub strata: Vec<SampleStratum>,
    pub warnings: Vec<String>,
}

impl IdentificationReport {
    pub fn text(&self) -> String {
        let mut s = format!("identified latent law from {} ({} units)\n", self.input, self.n);
        for st in &self.strata {
            let l = &st.law;
            s.push_str(&format!("stratum x = {:?} ({} units)\n", st.x, st.n));
            let mut row = |label: String, v: String| s.push_str(&format!("  {label:<24} {v}\n"));
            row("pr(A* = 1)".into(), format!("{:.4}", l.pi));
            row("pr(A = 1 | A* = 0, 1)".into(), format!("{:.4} {:.4}", l.p_a[0], l.p_a[1]));
            row("pr(Z = 1 | A* = 0, 1)".into(), format!("{:.4} {:.4}", l.p_z[0], l.p_z[1]));
            for (v, p) in self.levels.iter().zip(&l.p_y) {
                row(format!("pr(Y = {v} | A* = 0, 1)"), format!("{:.4} {:.4}", p[0], p[1]));
            }
        }
        for w in &self.warnings {
            s.push_str(&format!("warning: {w}\n"));
        }
        s
    }
}
