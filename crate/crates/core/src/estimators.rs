//! Influence-function estimators of the counterfactual means E{Y^(1)} and E{Y^(0)}.
//!
//! The unobservable indicator I(A* = s) in the full-data influence function is replaced
//! by the product weight `M = M_A M_Z`, whose mean given (A*, X) is I(A* = s).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::config::EstimatorConfig;
use crate::data::{ObservedDataset, OutcomeKind};
use crate::em::FoldAssignment;
use crate::error::{Error, Result};
use crate::kernel::{silverman_bandwidth, WeightMatrix};
use crate::nuisance::{NuisanceSet, OutcomeLaw, UnitNuisance};

/// Product weight and its factors for one unit and target arm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MWeight {
    pub m_a: f64,
    pub m_z: f64,
    pub m: f64,
    /// A denominator was floored at the trimming level.
    pub trimmed: bool,
}

/// Floors `|x|` at `eps`, keeping the sign (zero counts as positive).
pub fn floor_signed(x: f64, eps: f64) -> (f64, bool) {
    if x.abs() >= eps {
        (x, false)
    } else if x < 0.0 {
        (-eps, true)
    } else {
        (eps, true)
    }
}

/// `M_A = {A - E(A|1-s,X)} / {E(A|s,X) - E(A|1-s,X)}`, likewise `M_Z`, and `M = M_A M_Z`.
pub fn m_weight(a: u8, z: u8, u: &UnitNuisance, s: usize, eps: f64) -> MWeight {
    let t = 1 - s;
    let (da, ta) = floor_signed(u.surrogate[s] - u.surrogate[t], eps);
    let (dz, tz) = floor_signed(u.proxy[s] - u.proxy[t], eps);
    let m_a = (f64::from(a) - u.surrogate[t]) / da;
    let m_z = (f64::from(z) - u.proxy[t]) / dz;
    MWeight {
        m_a,
        m_z,
        m: m_a * m_z,
        trimmed: ta || tz,
    }
}

/// Uncentred score `S_s = M (Y - mu_s) / f(s|X) + mu_s` with the propensity floored.
pub fn score(y: f64, a: u8, z: u8, u: &UnitNuisance, s: usize, eps: f64) -> (f64, bool) {
    let w = m_weight(a, z, u, s, eps);
    let f = u.prior(s);
    let ft = f.max(eps);
    (w.m * (y - u.outcome[s]) / ft + u.outcome[s], w.trimmed || ft != f)
}

/// Observed-data influence function of E{Y^(s)} at `psi`.
pub fn influence_value(y: f64, a: u8, z: u8, u: &UnitNuisance, s: usize, psi: f64, eps: f64) -> f64 {
    score(y, a, z, u, s, eps).0 - psi
}

/// Estimate with its centred influence values and Wald interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceSample {
    pub estimand: String,
    pub estimate: f64,
    pub se: f64,
    pub ci: [f64; 2],
    #[serde(skip)]
    pub values: Vec<f64>,
}

impl InfluenceSample {
    /// Builds from centred influence values; `se = sd / sqrt(n)`.
    pub fn new(estimand: impl Into<String>, estimate: f64, values: Vec<f64>, level: f64) -> Self {
        let (se, ci) = sandwich_ci(&values, estimate, level);
        Self {
            estimand: estimand.into(),
            estimate,
            se,
            ci,
            values,
        }
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci[0] <= truth && truth <= self.ci[1]
    }
}

/// Normal quantile for a two-sided interval at `level`.
pub fn z_quantile(level: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(0.5 + level / 2.0)
}

/// Standard error `sd(phi) / sqrt(n)` and interval `estimate -/+ z se`.
pub fn sandwich_ci(values: &[f64], estimate: f64, level: f64) -> (f64, [f64; 2]) {
    let n = values.len() as f64;
    if n < 2.0 {
        return (f64::NAN, [f64::NAN, f64::NAN]);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let z = z_quantile(level);
    (se, [estimate - z * se, estimate + z * se])
}

/// Both counterfactual means and their contrast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteEstimate {
    pub psi1: InfluenceSample,
    pub psi0: InfluenceSample,
    pub ate: InfluenceSample,
    /// Units where a propensity or mean separation hit the trimming floor.
    pub trims: usize,
    /// Units whose labels were flipped to satisfy the labelling rule locally.
    pub flips: usize,
}

pub const LEVEL: f64 = 0.95;

/// Counterfactual means from per-unit scores; `mu[i][s]` is the outcome regression of
/// the (possibly transformed) outcome `y`.
fn arms(y: &[f64], a: &[u8], z: &[u8], units: &[UnitNuisance], mu: &[[f64; 2]], eps: f64) -> (AteEstimate, usize) {
    let n = y.len();
    let mut s = [vec![0.0; n], vec![0.0; n]];
    let mut trims = 0;
    for i in 0..n {
        let mut u = units[i];
        u.outcome = mu[i];
        let mut hit = false;
        for arm in 0..2 {
            let (v, t) = score(y[i], a[i], z[i], &u, arm, eps);
            s[arm][i] = v;
            hit |= t;
        }
        trims += usize::from(hit);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (p1, p0) = (mean(&s[1]), mean(&s[0]));
    let c1: Vec<f64> = s[1].iter().map(|v| v - p1).collect();
    let c0: Vec<f64> = s[0].iter().map(|v| v - p0).collect();
    let cd: Vec<f64> = c1.iter().zip(&c0).map(|(a, b)| a - b).collect();
    (
        AteEstimate {
            psi1: InfluenceSample::new("psi1", p1, c1, LEVEL),
            psi0: InfluenceSample::new("psi0", p0, c0, LEVEL),
            ate: InfluenceSample::new("ate", p1 - p0, cd, LEVEL),
            trims,
            flips: 0,
        },
        trims,
    )
}

fn check_sizes(data: &ObservedDataset, nuis: &NuisanceSet) -> Result<()> {
    if data.n() != nuis.n() {
        return Err(Error::Validation(format!(
            "{} units but {} nuisance rows",
            data.n(),
            nuis.n()
        )));
    }
    Ok(())
}

/// Nuisances after trimming and unit-level orientation.
pub fn prepare(nuis: &NuisanceSet, config: &EstimatorConfig) -> (NuisanceSet, usize) {
    let (t, _) = nuis.trimmed(config.trim_epsilon);
    t.oriented(config.label_condition)
}

/// Estimates E{Y^(1)}, E{Y^(0)} and their difference. At each unit the class with the
/// larger surrogate mean (under the configured rule) is treated as `A* = 1`.
pub fn estimate_ate(data: &ObservedDataset, nuis: &NuisanceSet, config: &EstimatorConfig) -> Result<AteEstimate> {
    check_sizes(data, nuis)?;
    let (o, flips) = prepare(nuis, config);
    let mu: Vec<[f64; 2]> = o.units.iter().map(|u| u.outcome).collect();
    let (mut est, _) = arms(data.y(), data.a(), data.z(), &o.units, &mu, config.trim_epsilon);
    est.flips = flips;
    Ok(est)
}

/// Per-level counterfactual probabilities pr(Y^(s) = level) for a categorical outcome.
pub fn estimate_levels(data: &ObservedDataset, nuis: &NuisanceSet, config: &EstimatorConfig) -> Result<Vec<(f64, AteEstimate)>> {
    check_sizes(data, nuis)?;
    let kind = data.kind();
    let k = kind
        .levels()
        .ok_or_else(|| Error::Validation("per-level estimates need a discrete outcome".into()))?;
    let (o, flips) = prepare(nuis, config);
    let OutcomeLaw::Discrete { probs, .. } = &o.outcome_law else {
        return Err(Error::Validation("nuisances carry no outcome distribution".into()));
    };
    (0..k)
        .map(|r| {
            let v = kind.level_value(r);
            let y: Vec<f64> = data.y().iter().map(|&y| f64::from(u8::from(y == v))).collect();
            let mu: Vec<[f64; 2]> = probs.iter().map(|p| p[r]).collect();
            let (mut est, _) = arms(&y, data.a(), data.z(), &o.units, &mu, config.trim_epsilon);
            est.flips = flips;
            Ok((v, est))
        })
        .collect()
}

/// Infeasible benchmark: the same estimator evaluated at the true nuisances.
pub fn oracle_estimate(data: &ObservedDataset, truth: Option<&NuisanceSet>, config: &EstimatorConfig) -> Result<AteEstimate> {
    let truth = truth.ok_or_else(|| {
        Error::Unavailable("the oracle estimate needs the true nuisance functions".into())
    })?;
    estimate_ate(data, truth, config)
}

/// Treats the surrogate as if it were the treatment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveEstimate {
    pub psi1: f64,
    pub psi0: f64,
    pub warnings: Vec<String>,
}

fn expit(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Newton fit of a logistic regression with a tiny ridge for stability. Returns the
/// coefficients and whether the iterations converged.
pub fn logistic_fit(design: &DMatrix<f64>, y: &[f64]) -> (DVector<f64>, bool) {
    let (n, p) = design.shape();
    let yv = DVector::from_column_slice(y);
    let mut beta = DVector::zeros(p);
    for _ in 0..100 {
        let eta = design * &beta;
        let mu = eta.map(expit);
        let w = mu.map(|m| (m * (1.0 - m)).max(1e-10));
        let grad = design.transpose() * (&yv - &mu) - 1e-8 * &beta;
        let mut hess = DMatrix::<f64>::zeros(p, p);
        for i in 0..n {
            let row = design.row(i);
            hess += w[i] * row.transpose() * row;
        }
        for j in 0..p {
            hess[(j, j)] += 1e-8;
        }
        let Some(step) = hess.cholesky().map(|c| c.solve(&grad)) else {
            return (beta, false);
        };
        beta += &step;
        if step.amax() < 1e-10 {
            let ok = beta.amax() < 30.0;
            return (beta, ok);
        }
    }
    (beta, false)
}

/// Binary outcome: logistic regression of Y on (1, A, X) standardised over X.
/// Other outcomes: kernel regression of Y on X within each surrogate arm.
pub fn naive_estimate(data: &ObservedDataset) -> Result<NaiveEstimate> {
    let n = data.n();
    let d = data.d();
    let mut warnings = Vec::new();
    if data.kind() == OutcomeKind::Binary {
        let design = DMatrix::from_fn(n, d + 2, |i, j| match j {
            0 => 1.0,
            1 => f64::from(data.a()[i]),
            _ => data.x_row(i)[j - 2],
        });
        let (beta, ok) = logistic_fit(&design, data.y());
        if !ok {
            warnings.push("logistic fit did not converge (possible separation)".into());
        }
        let mut psi = [0.0; 2];
        for (s, p) in psi.iter_mut().enumerate() {
            *p = (0..n)
                .map(|i| {
                    let mut eta = beta[0] + beta[1] * s as f64;
                    for j in 0..d {
                        eta += beta[j + 2] * data.x_row(i)[j];
                    }
                    expit(eta)
                })
                .sum::<f64>()
                / n as f64;
        }
        return Ok(NaiveEstimate {
            psi1: psi[1],
            psi0: psi[0],
            warnings,
        });
    }
    let mut psi = [0.0; 2];
    for (s, p) in psi.iter_mut().enumerate() {
        let arm: Vec<usize> = (0..n).filter(|&i| data.a()[i] as usize == s).collect();
        if arm.is_empty() {
            return Err(Error::Validation(format!("no units with A = {s}")));
        }
        let ya: Vec<f64> = arm.iter().map(|&i| data.y()[i]).collect();
        if d == 0 || arm.len() < 2 {
            *p = ya.iter().sum::<f64>() / ya.len() as f64;
            continue;
        }
        let xa: Vec<f64> = arm.iter().flat_map(|&i| data.x_row(i).iter().copied()).collect();
        let h = silverman_bandwidth(&xa, arm.len(), d)?;
        let w = WeightMatrix::build_sized(data.x(), n, &xa, arm.len(), d, h);
        let (fit, fb) = w.regress(&ya);
        if fb > 0 {
            warnings.push(format!("{fb} units used nearest-neighbour fallback in arm A = {s}"));
        }
        *p = fit.iter().sum::<f64>() / n as f64;
    }
    Ok(NaiveEstimate {
        psi1: psi[1],
        psi0: psi[0],
        warnings,
    })
}

/// Conditional moments given X used by the closed-form solution.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CondMoments {
    pub y: f64,
    pub a: f64,
    pub z: f64,
    pub ya: f64,
    pub yz: f64,
    pub az: f64,
    pub yaz: f64,
}

const MOMENT_TOL: f64 = 1e-10;

/// Both roots of the moment equations. Each root is a full nuisance vector in which the
/// class called "1" is one of the two latent classes; the roots differ by relabelling.
pub fn moment_branches(m: &CondMoments) -> Result<[UnitNuisance; 2]> {
    let f = m.yaz - m.yz * m.a;
    let g = m.z * m.a - m.az;
    let h = m.y * m.a - m.ya;
    if h.abs() < MOMENT_TOL || g.abs() < MOMENT_TOL {
        return Err(Error::Solve("moment equations are degenerate (G or H is zero)".into()));
    }
    let b = f + g * m.y - h * m.z;
    let disc = b * b + 4.0 * h * (f * m.z + g * m.yz);
    if disc < 0.0 {
        return Err(Error::Solve(format!("negative discriminant {disc:e}")));
    }
    let root = disc.sqrt();
    let mut out = [UnitNuisance {
        propensity: 0.0,
        surrogate: [0.0; 2],
        proxy: [0.0; 2],
        outcome: [0.0; 2],
    }; 2];
    for (bi, sign) in [1.0, -1.0].into_iter().enumerate() {
        let z1 = (-b + sign * root) / (2.0 * h);
        let z0 = (-b - sign * root) / (2.0 * h);
        let y1 = (-f - h * z0) / g;
        let y0 = (-f - h * z1) / g;
        if (y0 - m.y).abs() < MOMENT_TOL || (y1 - m.y).abs() < MOMENT_TOL {
            return Err(Error::Solve("outcome means coincide with the marginal".into()));
        }
        let a1 = (m.a * y0 - m.ya) / (y0 - m.y);
        let a0 = (m.a * y1 - m.ya) / (y1 - m.y);
        let den = m.az - m.a * z0 - m.z * a0 + a0 * z0;
        if den.abs() < MOMENT_TOL {
            return Err(Error::Solve("propensity denominator vanishes".into()));
        }
        let pr1 = (m.z - z0) * (m.a - a0) / den;
        out[bi] = UnitNuisance {
            propensity: pr1,
            surrogate: [a0, a1],
            proxy: [z0, z1],
            outcome: [y0, y1],
        };
    }
    Ok(out)
}

/// Root satisfying the labelling rule, checked to be a valid set of probabilities.
pub fn moment_solution(m: &CondMoments, config: &EstimatorConfig) -> Result<UnitNuisance> {
    let [b0, b1] = moment_branches(m)?;
    let u = if b0.needs_swap(config.label_condition) { b1 } else { b0 };
    let probs = [u.propensity, u.surrogate[0], u.surrogate[1], u.proxy[0], u.proxy[1]];
    if probs.iter().any(|p| !(0.0..=1.0).contains(p) || !p.is_finite()) {
        return Err(Error::Solve("moment solution is not a probability law".into()));
    }
    Ok(u)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentPluginEstimate {
    pub psi1: InfluenceSample,
    pub psi0: InfluenceSample,
    /// Units dropped because the closed form had no valid root there.
    pub excluded: usize,
}

/// Kernel estimates of the seven conditional moments, cross-fitted, solved in closed
/// form at every unit and plugged into the influence-function estimator.
pub fn moment_plugin_estimate(data: &ObservedDataset, folds: &FoldAssignment, config: &EstimatorConfig) -> Result<MomentPluginEstimate> {
    let n = data.n();
    let d = data.d();
    let cols: Vec<[f64; 7]> = (0..n)
        .map(|i| {
            let (y, a, z) = (data.y()[i], f64::from(data.a()[i]), f64::from(data.z()[i]));
            [y, a, z, y * a, y * z, a * z, y * a * z]
        })
        .collect();
    let mut moments = vec![CondMoments::default(); n];
    for j in 0..folds.k {
        let eval = folds.eval(j);
        let train = folds.train(j);
        if eval.is_empty() {
            continue;
        }
        let fitted: Vec<[f64; 7]> = if d == 0 {
            let mut avg = [0.0; 7];
            for &t in &train {
                for c in 0..7 {
                    avg[c] += cols[t][c] / train.len() as f64;
                }
            }
            vec![avg; eval.len()]
        } else {
            let xt: Vec<f64> = train.iter().flat_map(|&t| data.x_row(t).iter().copied()).collect();
            let xe: Vec<f64> = eval.iter().flat_map(|&i| data.x_row(i).iter().copied()).collect();
            let h = config.bandwidth_scale * silverman_bandwidth(&xt, train.len(), d)?;
            let w = WeightMatrix::build_sized(&xe, eval.len(), &xt, train.len(), d, h);
            let mut out = vec![[0.0; 7]; eval.len()];
            for c in 0..7 {
                let target: Vec<f64> = train.iter().map(|&t| cols[t][c]).collect();
                let (fit, _) = w.regress(&target);
                for (e, v) in fit.into_iter().enumerate() {
                    out[e][c] = v;
                }
            }
            out
        };
        for (e, &i) in eval.iter().enumerate() {
            let v = fitted[e];
            moments[i] = CondMoments {
                y: v[0],
                a: v[1],
                z: v[2],
                ya: v[3],
                yz: v[4],
                az: v[5],
                yaz: v[6],
            };
        }
    }
    let eps = config.trim_epsilon;
    let mut keep = Vec::with_capacity(n);
    let mut units = Vec::with_capacity(n);
    for i in 0..n {
        if let Ok(mut u) = moment_solution(&moments[i], config) {
            u.propensity = u.propensity.clamp(eps, 1.0 - eps);
            keep.push(i);
            units.push(u);
        }
    }
    if keep.len() < 2 {
        return Err(Error::Solve("the moment equations had no valid root at any unit".into()));
    }
    let y: Vec<f64> = keep.iter().map(|&i| data.y()[i]).collect();
    let a: Vec<u8> = keep.iter().map(|&i| data.a()[i]).collect();
    let z: Vec<u8> = keep.iter().map(|&i| data.z()[i]).collect();
    let mu: Vec<[f64; 2]> = units.iter().map(|u| u.outcome).collect();
    let (est, _) = arms(&y, &a, &z, &units, &mu, eps);
    Ok(MomentPluginEstimate {
        psi1: est.psi1,
        psi0: est.psi0,
        excluded: n - keep.len(),
    })
}

/// Median aggregation over repeated sample splits: the median estimate and the median
/// of `se_r^2 + (psi_r - psi_med)^2`.
pub fn median_aggregate(runs: &[(f64, f64)]) -> (f64, f64) {
    let median = |mut v: Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.total_cmp(b));
        let m = v.len();
        if m % 2 == 1 {
            v[m / 2]
        } else {
            0.5 * (v[m / 2 - 1] + v[m / 2])
        }
    };
    let psi = median(runs.iter().map(|r| r.0).collect());
    let var = median(runs.iter().map(|(p, se)| se * se + (p - psi).powi(2)).collect());
    (psi, var.sqrt())
}
