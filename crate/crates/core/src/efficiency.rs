//! Projection of the influence function onto the orthocomplement of the nuisance
//! tangent directions that vanish given (A*, X), and the resulting one-step update.
//!
//! For a k-level outcome, `p_j(Y)` (j = 1..k-2) has mean zero given either value of
//! A*; interacting it with centred surrogate and proxy terms gives 2(k-2) directions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::config::EstimatorConfig;
use crate::data::{ObservedDataset, OutcomeKind};
use crate::error::{Error, Result};
use crate::estimators::{estimate_ate, prepare};
use crate::nuisance::{NuisanceSet, OutcomeLaw, UnitNuisance};

const COND_LIMIT: f64 = 1e10;
const RIDGE: f64 = 1e-8;

/// Basis values at outcome level `level`; `py[r][s]` = pr(Y = r | A* = s, X). Entries
/// whose denominators are closer than `eps` to zero are set to zero and flagged.
pub fn build_basis(level: usize, py: &[[f64; 2]], eps: f64) -> (Vec<f64>, usize) {
    let k = py.len();
    if k < 3 {
        return (Vec::new(), 0);
    }
    let ind = |r: usize| if level == r { 1.0 } else { 0.0 };
    let d0 = py[0][1] - py[0][0];
    let mut dropped = 0;
    let out = (1..k - 1)
        .map(|t| {
            let dt = py[t][0] - py[t][1];
            if d0.abs() < eps || dt.abs() < eps {
                dropped += 1;
                return 0.0;
            }
            (ind(0) - py[0][0]) / d0 + (ind(t) - py[t][1]) / dt - 1.0
        })
        .collect();
    (out, dropped)
}

/// Directions `[(A - E(A|0))(Z - E(Z|1)) p, (A - E(A|1))(Z - E(Z|0)) p]`.
pub fn build_v(a: u8, z: u8, u: &UnitNuisance, p: &[f64]) -> Vec<f64> {
    let (a, z) = (f64::from(a), f64::from(z));
    let first = (a - u.surrogate[0]) * (z - u.proxy[1]);
    let second = (a - u.surrogate[1]) * (z - u.proxy[0]);
    p.iter().map(|pj| first * pj).chain(p.iter().map(|pj| second * pj)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    #[serde(skip)]
    pub phi_eff: Vec<f64>,
    pub coef: Vec<f64>,
    /// Directions kept after removing columns that vanish everywhere.
    pub basis_dim: usize,
    pub ridge: bool,
    /// Weighted second moments of the original and projected functions.
    pub var_phi: f64,
    pub var_phi_eff: f64,
}

/// `phi - E(phi V') E(V V')^{-1} V` with expectations under `weights` (uniform when
/// `None`). A ridge of 1e-8 is added when the Gram matrix is ill-conditioned.
pub fn project(phi: &[f64], v: &[Vec<f64>], weights: Option<&[f64]>) -> Result<Projection> {
    let n = phi.len();
    if v.len() != n {
        return Err(Error::Validation("basis and influence values disagree in length".into()));
    }
    let w: Vec<f64> = match weights {
        Some(w) => {
            let tot: f64 = w.iter().sum();
            w.iter().map(|x| x / tot).collect()
        }
        None => vec![1.0 / n as f64; n],
    };
    let second = |f: &[f64]| f.iter().zip(&w).map(|(a, b)| b * a * a).sum::<f64>();
    let var_phi = second(phi);
    let dim = v.first().map_or(0, |r| r.len());
    let keep: Vec<usize> = (0..dim).filter(|&j| v.iter().any(|r| r[j] != 0.0)).collect();
    if keep.is_empty() {
        return Ok(Projection {
            phi_eff: phi.to_vec(),
            coef: Vec::new(),
            basis_dim: 0,
            ridge: false,
            var_phi,
            var_phi_eff: var_phi,
        });
    }
    let q = keep.len();
    let mut gram = DMatrix::<f64>::zeros(q, q);
    let mut cross = DVector::<f64>::zeros(q);
    for i in 0..n {
        let vi = DVector::from_iterator(q, keep.iter().map(|&j| v[i][j]));
        gram += w[i] * &vi * vi.transpose();
        cross += w[i] * phi[i] * &vi;
    }
    let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    let ridge = !(lo > 0.0) || hi / lo > COND_LIMIT;
    if ridge {
        for j in 0..q {
            gram[(j, j)] += RIDGE;
        }
    }
    let coef = gram
        .clone()
        .cholesky()
        .map(|c| c.solve(&cross))
        .or_else(|| gram.lu().solve(&cross))
        .ok_or_else(|| Error::Solve("Gram matrix of the projection basis is singular".into()))?;
    let phi_eff: Vec<f64> = (0..n)
        .map(|i| phi[i] - keep.iter().enumerate().map(|(c, &j)| coef[c] * v[i][j]).sum::<f64>())
        .collect();
    let var_phi_eff = second(&phi_eff);
    Ok(Projection {
        phi_eff,
        coef: coef.iter().copied().collect(),
        basis_dim: q,
        ridge,
        var_phi,
        var_phi_eff,
    })
}

/// Equal-width bins on `(-L, L]`, with empty bins merged into a neighbour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bins {
    pub lower: f64,
    /// Upper edges of the merged bins, increasing; the last one is `L`.
    pub upper: Vec<f64>,
}

impl Bins {
    pub fn k(&self) -> usize {
        self.upper.len()
    }

    pub fn bin_of(&self, y: f64) -> usize {
        self.upper.iter().position(|&e| y <= e).unwrap_or(self.upper.len() - 1)
    }
}

/// Bins for a continuous outcome. `half_width` defaults to `max|Y| (1 + 1e-9)`.
pub fn discretize(y: &[f64], k: usize, half_width: Option<f64>) -> Result<Bins> {
    if k < 2 {
        return Err(Error::Validation("need at least two bins".into()));
    }
    let l = half_width.unwrap_or_else(|| y.iter().fold(0.0f64, |m, v| m.max(v.abs())) * (1.0 + 1e-9));
    if !(l > 0.0) {
        return Err(Error::Validation("outcome is identically zero".into()));
    }
    let raw: Vec<f64> = (1..=k).map(|j| -l + 2.0 * l * j as f64 / k as f64).collect();
    let mut counts = vec![0usize; k];
    for &v in y {
        let j = raw.iter().position(|&e| v <= e).unwrap_or(k - 1);
        counts[j] += 1;
    }
    let mut upper = Vec::new();
    for j in 0..k {
        if counts[j] > 0 {
            upper.push(raw[j]);
        } else if j == k - 1 {
            // Empty last bin joins the previous one.
            if let Some(last) = upper.last_mut() {
                *last = raw[j];
            }
        }
    }
    if upper.is_empty() {
        return Err(Error::Validation("no outcome falls inside the bins".into()));
    }
    *upper.last_mut().unwrap() = l;
    Ok(Bins { lower: -l, upper })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub estimand: String,
    /// Outcome levels (or bins for a continuous outcome).
    pub k_or_bins: usize,
    pub basis_dim: usize,
    pub var_phi: f64,
    pub var_phi_eff: f64,
    pub psi: f64,
    pub psi_onestep: f64,
    pub se_onestep: f64,
    pub ridge: bool,
    pub dropped_basis_entries: usize,
}

/// One-step efficient updates of psi1, psi0 and their difference. Continuous outcomes
/// are discretised into `bins` equal-width bins first.
pub fn efficient_update(data: &ObservedDataset, nuis: &NuisanceSet, config: &EstimatorConfig, bins: usize) -> Result<Vec<EfficiencyReport>> {
    let est = estimate_ate(data, nuis, config)?;
    let (o, _) = prepare(nuis, config);
    let n = data.n();
    let eps = config.trim_epsilon;
    let (levels, probs): (Vec<usize>, Vec<Vec<[f64; 2]>>) = match (&o.outcome_law, data.kind()) {
        (OutcomeLaw::Discrete { probs, .. }, k) if k != OutcomeKind::Continuous => {
            ((0..n).map(|i| data.level(i).unwrap_or(0)).collect(), probs.clone())
        }
        (OutcomeLaw::Continuous { supports, fold_of, weights }, OutcomeKind::Continuous) => {
            let b = discretize(data.y(), bins, None)?;
            let probs = (0..n)
                .map(|i| {
                    let mut t = vec![[0.0; 2]; b.k()];
                    for (l, y) in supports[fold_of[i]].iter().enumerate() {
                        let j = b.bin_of(*y);
                        t[j][0] += weights[i][0][l];
                        t[j][1] += weights[i][1][l];
                    }
                    t
                })
                .collect();
            (data.y().iter().map(|&y| b.bin_of(y)).collect(), probs)
        }
        _ => {
            return Err(Error::Validation(
                "the efficient update needs the conditional outcome distribution".into(),
            ))
        }
    };
    let k = probs.first().map_or(0, |p| p.len());
    let mut dropped = 0;
    let v: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let (p, dr) = build_basis(levels[i], &probs[i], eps);
            dropped += dr;
            build_v(data.a()[i], data.z()[i], &o.units[i], &p)
        })
        .collect();
    let phi_ate: Vec<f64> = est.ate.values.clone();
    let mut out = Vec::new();
    for (name, psi, phi) in [
        ("psi1", est.psi1.estimate, &est.psi1.values),
        ("psi0", est.psi0.estimate, &est.psi0.values),
        ("ate", est.ate.estimate, &phi_ate),
    ] {
        let proj = project(phi, &v, None)?;
        let mean = proj.phi_eff.iter().sum::<f64>() / n as f64;
        // phi is centred at psi, so psi + mean(phi_eff) = psi + mean(phi_eff - phi);
        // the latter is exactly psi when there is nothing to project on.
        let shift = proj.phi_eff.iter().zip(phi).map(|(e, f)| e - f).sum::<f64>() / n as f64;
        let sd = (proj.phi_eff.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
        out.push(EfficiencyReport {
            estimand: name.into(),
            k_or_bins: k,
            basis_dim: proj.basis_dim,
            var_phi: proj.var_phi,
            var_phi_eff: proj.var_phi_eff,
            psi,
            psi_onestep: psi + shift,
            se_onestep: sd / (n as f64).sqrt(),
            ridge: proj.ridge,
            dropped_basis_entries: dropped,
        });
    }
    Ok(out)
}
