//! Further causal functionals, each obtained from its full-data influence function by
//! replacing I(A* = s) with the product weight M_s.
//!
//! Every influence function below is written once in terms of per-arm weights `w[s]`:
//! the observed-data version uses `w[s] = M_s`, the full-data version `w[s] = I(A* = s)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::EstimatorConfig;
use crate::data::ObservedDataset;
use crate::error::{Error, Result};
use crate::estimators::{m_weight, prepare, InfluenceSample, LEVEL};
use crate::nuisance::{NuisanceSet, UnitNuisance};

/// Observed-data weights `[M_0, M_1]`.
pub fn m_pair(a: u8, z: u8, u: &UnitNuisance, eps: f64) -> [f64; 2] {
    [m_weight(a, z, u, 0, eps).m, m_weight(a, z, u, 1, eps).m]
}

/// Full-data weights `[I(A* = 0), I(A* = 1)]`.
pub fn indicator_pair(latent: u8) -> [f64; 2] {
    if latent == 1 {
        [0.0, 1.0]
    } else {
        [1.0, 0.0]
    }
}

/// Effect on the treated, E(Y^(1) - Y^(0) | A* = 1), with `p1` = pr(A* = 1):
/// `[w_1 (Y - mu_1) - pi/(1-pi) w_0 (Y - mu_0) + (mu_1 - mu_0 - psi) pi] / p1`.
pub fn ett_if(y: f64, w: [f64; 2], u: &UnitNuisance, psi: f64, p1: f64) -> f64 {
    let pi = u.propensity;
    (w[1] * (y - u.outcome[1]) - pi / (1.0 - pi) * w[0] * (y - u.outcome[0])
        + (u.outcome[1] - u.outcome[0] - psi) * pi)
        / p1
}

/// Quantile of Y^(s) at level `gamma`, with `eta1` = pr(Y <= theta | A* = s, X):
/// `w_s {I(Y <= theta) - eta1} / f(s|X) + eta1 - gamma`.
pub fn qte_if(y: f64, w: [f64; 2], u: &UnitNuisance, s: usize, theta: f64, eta1: f64, gamma: f64) -> f64 {
    let ind = if y <= theta { 1.0 } else { 0.0 };
    w[s] * (ind - eta1) / u.prior(s) + eta1 - gamma
}

/// Semi-linear effect `beta` in E(Y | A*, X) = beta A* + b(X), b(X) = E(Y | A* = 0, X):
/// `h(X) {w_1 (Y - beta - b)(1 - pi) - w_0 (Y - b) pi}`.
pub fn semilinear_if(y: f64, w: [f64; 2], u: &UnitNuisance, beta: f64, h: f64) -> f64 {
    let pi = u.propensity;
    let b = u.outcome[0];
    h * (w[1] * (y - beta - b) * (1.0 - pi) - w[0] * (y - b) * pi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Logit,
}

impl Link {
    pub fn inverse(&self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logit => 1.0 / (1.0 + (-eta).exp()),
        }
    }

    fn inverse_deriv(&self, eta: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Logit => {
                let e = self.inverse(eta);
                e * (1.0 - e)
            }
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Link::Identity),
            "logit" => Ok(Link::Logit),
            other => Err(Error::Validation(format!("unknown link '{other}'"))),
        }
    }
}

/// Regressor `h(s, V) = (1, s, V)`.
pub fn msm_design(s: usize, v: &[f64]) -> Vec<f64> {
    let mut h = Vec::with_capacity(2 + v.len());
    h.push(1.0);
    h.push(s as f64);
    h.extend_from_slice(v);
    h
}

/// Marginal structural model g{E(Y^(s) | V)} = beta' h(s, V):
/// `sum_s [w_s / f(s|X) h(s,V) (Y - mu_s) + h(s,V) {mu_s - g^{-1}(beta' h(s,V))}]`.
pub fn msm_if(y: f64, w: [f64; 2], u: &UnitNuisance, v: &[f64], beta: &[f64], link: Link) -> Vec<f64> {
    let mut out = vec![0.0; 2 + v.len()];
    for s in 0..2 {
        let h = msm_design(s, v);
        let eta: f64 = h.iter().zip(beta).map(|(a, b)| a * b).sum();
        let c = w[s] / u.prior(s) * (y - u.outcome[s]) + u.outcome[s] - link.inverse(eta);
        for (o, hj) in out.iter_mut().zip(&h) {
            *o += hj * c;
        }
    }
    out
}

fn check(data: &ObservedDataset, nuis: &NuisanceSet) -> Result<()> {
    if data.n() != nuis.n() {
        return Err(Error::Validation("data and nuisances have different lengths".into()));
    }
    Ok(())
}

/// Effect on the treated. The estimating equation is linear in `psi`.
pub fn estimate_ett(data: &ObservedDataset, nuis: &NuisanceSet, config: &EstimatorConfig) -> Result<InfluenceSample> {
    check(data, nuis)?;
    let share = nuis.units.iter().map(|u| u.propensity).sum::<f64>() / nuis.n() as f64;
    if !(share > 0.0 && share < 1.0) {
        return Err(Error::Validation(format!("pr(A* = 1) is {share}; the effect on the treated needs both classes")));
    }
    let (o, _) = prepare(nuis, config);
    let eps = config.trim_epsilon;
    let n = data.n() as f64;
    let p1 = o.units.iter().map(|u| u.propensity).sum::<f64>() / n;
    let mut num = 0.0;
    for (i, u) in o.units.iter().enumerate() {
        let w = m_pair(data.a()[i], data.z()[i], u, eps);
        num += ett_if(data.y()[i], w, u, 0.0, 1.0);
    }
    let psi = num / (n * p1);
    let values: Vec<f64> = o
        .units
        .iter()
        .enumerate()
        .map(|(i, u)| ett_if(data.y()[i], m_pair(data.a()[i], data.z()[i], u, eps), u, psi, p1))
        .collect();
    Ok(InfluenceSample::new("ett", psi, values, LEVEL))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QteEstimate {
    pub arm: usize,
    pub gamma: f64,
    pub theta: f64,
    /// Standard deviation of the estimating function at `theta` over sqrt(n); it omits
    /// the density rescaling and is reported as a plug-in quantity.
    pub se_plugin: f64,
    /// The search stopped at the smallest observed outcome.
    pub boundary: bool,
}

/// Quantile of Y^(arm): the smallest observed outcome at which the averaged estimating
/// function is non-negative, located by bisection over the sorted outcomes.
pub fn estimate_qte(data: &ObservedDataset, nuis: &NuisanceSet, gamma: f64, arm: usize, config: &EstimatorConfig) -> Result<QteEstimate> {
    check(data, nuis)?;
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Validation("quantile level must lie in (0, 1)".into()));
    }
    if arm > 1 {
        return Err(Error::Validation("arm must be 0 or 1".into()));
    }
    let (o, _) = prepare(nuis, config);
    let eps = config.trim_epsilon;
    let n = data.n();
    let w: Vec<[f64; 2]> = (0..n).map(|i| m_pair(data.a()[i], data.z()[i], &o.units[i], eps)).collect();
    let values_at = |theta: f64| -> Result<Vec<f64>> {
        (0..n)
            .map(|i| {
                let eta1 = o.outcome_law.cdf(i, arm, theta).ok_or_else(|| {
                    Error::Validation("quantile effects need the conditional outcome distribution".into())
                })?;
                let mut u = o.units[i];
                u.propensity = u.propensity.clamp(eps, 1.0 - eps);
                Ok(qte_if(data.y()[i], w[i], &u, arm, theta, eta1, gamma))
            })
            .collect()
    };
    let mean_at = |theta: f64| -> Result<f64> { Ok(values_at(theta)?.iter().sum::<f64>() / n as f64) };
    let mut grid: Vec<f64> = data.y().to_vec();
    grid.sort_by(|a, b| a.total_cmp(b));
    grid.dedup();
    let (mut lo, mut hi) = (0, grid.len() - 1);
    let mut boundary = false;
    let theta = if mean_at(grid[lo])? >= 0.0 {
        boundary = true;
        grid[lo]
    } else if mean_at(grid[hi])? < 0.0 {
        return Err(Error::Quantile(format!(
            "estimating function is negative over the whole outcome range at level {gamma}"
        )));
    } else {
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if mean_at(grid[mid])? >= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        grid[hi]
    };
    let vals = values_at(theta)?;
    let mean = vals.iter().sum::<f64>() / n as f64;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    Ok(QteEstimate {
        arm,
        gamma,
        theta,
        se_plugin: sd / (n as f64).sqrt(),
        boundary,
    })
}

/// Semi-linear effect with index function `h` (all ones when `None`).
pub fn estimate_semilinear(data: &ObservedDataset, nuis: &NuisanceSet, h: Option<&[f64]>, config: &EstimatorConfig) -> Result<InfluenceSample> {
    check(data, nuis)?;
    let (o, _) = prepare(nuis, config);
    let eps = config.trim_epsilon;
    let n = data.n();
    let hv = |i: usize| h.map_or(1.0, |h| h[i]);
    let mut num = 0.0;
    let mut den = 0.0;
    let w: Vec<[f64; 2]> = (0..n).map(|i| m_pair(data.a()[i], data.z()[i], &o.units[i], eps)).collect();
    for i in 0..n {
        num += semilinear_if(data.y()[i], w[i], &o.units[i], 0.0, hv(i));
        den += hv(i) * w[i][1] * (1.0 - o.units[i].propensity);
    }
    if den.abs() < 1e-12 * n as f64 {
        return Err(Error::Solve("semi-linear estimating equation has zero slope".into()));
    }
    let beta = num / den;
    let scale = den / n as f64;
    let values = (0..n)
        .map(|i| semilinear_if(data.y()[i], w[i], &o.units[i], beta, hv(i)) / scale)
        .collect();
    Ok(InfluenceSample::new("semilinear", beta, values, LEVEL))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsmEstimate {
    pub link: Link,
    /// Coefficients on (1, A*, V).
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

const NEWTON_STEPS: usize = 100;
const HALVINGS: usize = 30;
const NEWTON_TOL: f64 = 1e-10;
const BOUNDARY: f64 = 1e-8;

/// Marginal structural model with regressors (1, A*, V), where V are the covariate
/// columns `v_cols`. Solved by damped Newton.
pub fn estimate_msm(data: &ObservedDataset, nuis: &NuisanceSet, v_cols: &[usize], link: Link, config: &EstimatorConfig) -> Result<MsmEstimate> {
    check(data, nuis)?;
    if let Some(&c) = v_cols.iter().find(|&&c| c >= data.d()) {
        return Err(Error::Validation(format!("covariate column {c} out of range")));
    }
    let (o, _) = prepare(nuis, config);
    let eps = config.trim_epsilon;
    let n = data.n();
    let p = 2 + v_cols.len();
    let v: Vec<Vec<f64>> = (0..n).map(|i| v_cols.iter().map(|&c| data.x_row(i)[c]).collect()).collect();
    let w: Vec<[f64; 2]> = (0..n).map(|i| m_pair(data.a()[i], data.z()[i], &o.units[i], eps)).collect();
    let mean_score = |beta: &[f64]| -> DVector<f64> {
        let mut u = DVector::zeros(p);
        for i in 0..n {
            let phi = msm_if(data.y()[i], w[i], &o.units[i], &v[i], beta, link);
            for j in 0..p {
                u[j] += phi[j] / n as f64;
            }
        }
        u
    };
    let jacobian = |beta: &[f64]| -> DMatrix<f64> {
        let mut jm = DMatrix::zeros(p, p);
        for vi in &v {
            for s in 0..2 {
                let h = DVector::from_vec(msm_design(s, vi));
                let eta: f64 = h.iter().zip(beta).map(|(a, b)| a * b).sum();
                jm -= link.inverse_deriv(eta) / n as f64 * &h * h.transpose();
            }
        }
        jm
    };
    let mut beta = vec![0.0; p];
    let mut u = mean_score(&beta);
    let mut iterations = 0;
    while u.amax() >= NEWTON_TOL {
        if iterations == NEWTON_STEPS {
            return Err(Error::Solve(format!(
                "Newton did not converge in {NEWTON_STEPS} steps (residual {:.3e})",
                u.amax()
            )));
        }
        iterations += 1;
        let jm = jacobian(&beta);
        let step = jm
            .lu()
            .solve(&(-&u))
            .ok_or_else(|| Error::Solve("singular Jacobian in the structural model".into()))?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=HALVINGS {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + t * s).collect();
            let uc = mean_score(&cand);
            if uc.norm() < u.norm() {
                beta = cand;
                u = uc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::Solve(format!("line search failed (residual {:.3e})", u.amax())));
        }
        if beta.iter().any(|b| b.abs() > 30.0) && link == Link::Logit {
            return Err(Error::Solve("coefficients diverge: fitted means approach the boundary".into()));
        }
    }
    if link == Link::Logit {
        let edge = v.iter().flat_map(|vi| (0..2).map(move |s| msm_design(s, vi))).any(|h| {
            let m = link.inverse(h.iter().zip(&beta).map(|(a, b)| a * b).sum());
            m.min(1.0 - m) < BOUNDARY
        });
        if edge {
            return Err(Error::Solve("fitted means reach the boundary of (0, 1)".into()));
        }
    }
    // Sandwich: J^{-1} E(phi phi') J^{-T} / n.
    let jm = jacobian(&beta);
    let jinv = jm
        .try_inverse()
        .ok_or_else(|| Error::Solve("singular Jacobian in the structural model".into()))?;
    let mut meat = DMatrix::zeros(p, p);
    for i in 0..n {
        let phi = DVector::from_vec(msm_if(data.y()[i], w[i], &o.units[i], &v[i], &beta, link));
        meat += &phi * phi.transpose() / n as f64;
    }
    let cov = &jinv * meat * jinv.transpose() / n as f64;
    Ok(MsmEstimate {
        link,
        se: (0..p).map(|j| cov[(j, j)].max(0.0).sqrt()).collect(),
        beta,
        iterations,
        residual: u.amax(),
    })
}
