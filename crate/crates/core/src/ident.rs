//! Identification of the latent law from exact (or empirical) observed tables.
//!
//! `P(Y,Z,A=1) P(Y,Z)^{-1}` is similar to `diag(pr(A=1|A*))`, so its eigenvalues are the
//! surrogate's class-conditional means and its eigenvectors are the outcome columns.

use serde::{Deserialize, Serialize};

use crate::config::LabelCondition;
use crate::data::ObservedDataset;
use crate::error::{Error, Result};
use crate::law::{DiscreteLaw, JointTable};

const DET_TOL: f64 = 1e-10;
const EIG_GAP_TOL: f64 = 1e-9;
const SIMPLEX_TOL: f64 = 1e-6;

/// Unlabelled solution: candidate `j` has surrogate mean `eigenvalues[j]`, outcome
/// column `columns[r][j]` and mass `mixing[j]`. Candidates are ordered by decreasing
/// eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenCandidate {
    pub eigenvalues: [f64; 2],
    pub columns: Vec<[f64; 2]>,
    pub mixing: [f64; 2],
    /// Proxy column `pr(Z = 1 | candidate j)`.
    pub proxy: [f64; 2],
    pub warnings: Vec<String>,
}

/// Labelled latent law of one stratum; arrays are indexed by `A*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifiedStratum {
    pub pi: f64,
    pub p_y: Vec<[f64; 2]>,
    pub p_a: [f64; 2],
    pub p_z: [f64; 2],
    pub warnings: Vec<String>,
}

type M2 = [[f64; 2]; 2];

fn det2(m: &M2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

fn inv2(m: &M2) -> M2 {
    let d = det2(m);
    [[m[1][1] / d, -m[0][1] / d], [-m[1][0] / d, m[0][0] / d]]
}

fn mul2(a: &M2, b: &M2) -> M2 {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

/// Eigen-pairs of a real 2x2 matrix with real spectrum; eigenvector columns are
/// normalised to sum to one. Eigenvalues come out in decreasing order.
fn eigen2(m: &M2, warnings: &mut Vec<String>) -> Result<([f64; 2], M2)> {
    let tr = m[0][0] + m[1][1];
    let mut disc = tr * tr / 4.0 - det2(m);
    if disc < 0.0 {
        if -disc <= 1e-12 * tr.abs().max(1.0).powi(2) {
            warnings.push(format!("dropped imaginary eigenvalue part ({disc:e})"));
            disc = 0.0;
        } else {
            return Err(Error::Identification(format!(
                "complex eigenvalues (discriminant {disc:e})"
            )));
        }
    }
    let root = disc.sqrt();
    let e = [tr / 2.0 + root, tr / 2.0 - root];
    if e[0] - e[1] < EIG_GAP_TOL {
        return Err(Error::Identification(format!(
            "repeated eigenvalue {:.6}; the two latent classes are not separated",
            e[0]
        )));
    }
    let mut v = [[0.0; 2]; 2];
    for (j, &ej) in e.iter().enumerate() {
        // (M - eI) v = 0; take whichever row gives the better-conditioned direction.
        let c1 = [m[0][1], ej - m[0][0]];
        let c2 = [ej - m[1][1], m[1][0]];
        let c = if c1[0].hypot(c1[1]) >= c2[0].hypot(c2[1]) { c1 } else { c2 };
        let s = c[0] + c[1];
        if s.abs() < 1e-14 {
            return Err(Error::Identification(
                "eigenvector cannot be normalised to a probability column".into(),
            ));
        }
        v[0][j] = c[0] / s;
        v[1][j] = c[1] / s;
    }
    Ok((e, v))
}

fn outcome_by_proxy(joint: &JointTable) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let pyz = joint
        .cells
        .iter()
        .map(|c| [c[0][0] + c[1][0], c[0][1] + c[1][1]])
        .collect();
    let pyz1 = joint.cells.iter().map(|c| c[1]).collect();
    (pyz, pyz1)
}

/// Best-conditioned grouping of outcome levels into two sets, as a row mask.
fn best_grouping(pyz: &[[f64; 2]]) -> (Vec<bool>, f64) {
    let k = pyz.len();
    let group = |mask: &[bool]| -> M2 {
        let mut b = [[0.0; 2]; 2];
        for (r, row) in pyz.iter().enumerate() {
            let g = usize::from(!mask[r]);
            b[g][0] += row[0];
            b[g][1] += row[1];
        }
        b
    };
    let masks: Vec<Vec<bool>> = if k <= 16 {
        (1..(1u32 << (k - 1)))
            .map(|bits| (0..k).map(|r| bits >> r & 1 == 1).collect())
            .collect()
    } else {
        (0..k).map(|t| (0..k).map(|r| r == t).collect()).collect()
    };
    masks
        .into_iter()
        .map(|m| {
            let d = det2(&group(&m)).abs();
            (m, d)
        })
        .fold((vec![], -1.0), |best, cur| if cur.1 > best.1 { cur } else { best })
}

fn check_determinant(det: f64) -> Result<()> {
    if det < DET_TOL {
        return Err(Error::Identification(format!(
            "determinant of P(Y,Z) is {det:.3e} (about zero): the outcome or proxy carries no \
             information on the latent treatment, or the surrogate equals it exactly"
        )));
    }
    Ok(())
}

/// |det P(Y,Z)| of the normalised table after the best two-set grouping of outcome
/// levels; an error when it is about zero.
pub fn relevance_determinant(joint: &JointTable) -> Result<f64> {
    let total = joint.total();
    if !(total > 0.0) {
        return Err(Error::Identification("empty table".into()));
    }
    let (pyz, _) = outcome_by_proxy(joint);
    let pyz: Vec<[f64; 2]> = pyz.iter().map(|r| [r[0] / total, r[1] / total]).collect();
    let (_, det) = best_grouping(&pyz);
    check_determinant(det)?;
    Ok(det)
}

/// Eigen-decomposition of the observed table, before any labelling.
pub fn eigen_candidates(joint: &JointTable) -> Result<EigenCandidate> {
    let k = joint.k();
    if k < 2 {
        return Err(Error::Identification("outcome needs at least two levels".into()));
    }
    let total = joint.total();
    if !(total > 0.0) {
        return Err(Error::Identification("empty table".into()));
    }
    let (pyz, pyz1): (Vec<[f64; 2]>, Vec<[f64; 2]>) = {
        let (a, b) = outcome_by_proxy(joint);
        (
            a.iter().map(|r| [r[0] / total, r[1] / total]).collect(),
            b.iter().map(|r| [r[0] / total, r[1] / total]).collect(),
        )
    };
    let (mask, det) = best_grouping(&pyz);
    check_determinant(det)?;
    let mut b = [[0.0; 2]; 2];
    let mut b1 = [[0.0; 2]; 2];
    for r in 0..k {
        let g = usize::from(!mask[r]);
        for z in 0..2 {
            b[g][z] += pyz[r][z];
            b1[g][z] += pyz1[r][z];
        }
    }
    let m = mul2(&b1, &inv2(&b));
    let mut warnings = Vec::new();
    let (e, v) = eigen2(&m, &mut warnings)?;
    if det2(&v).abs() < DET_TOL {
        return Err(Error::Identification("eigenvector matrix is singular".into()));
    }
    // W = V^{-1} B has rows pi_j * pr(Z = . | j).
    let w = mul2(&inv2(&v), &b);
    let mass = [w[0][0] + w[0][1], w[1][0] + w[1][1]];
    if mass.iter().any(|m| m.abs() < DET_TOL) {
        return Err(Error::Identification("a latent class has zero mass".into()));
    }
    let proxy = [w[0][1] / mass[0], w[1][1] / mass[1]];
    let winv = inv2(&w);
    let columns = pyz
        .iter()
        .map(|row| {
            [
                row[0] * winv[0][0] + row[1] * winv[1][0],
                row[0] * winv[0][1] + row[1] * winv[1][1],
            ]
        })
        .collect();
    let pr_a1: f64 = pyz1.iter().map(|r| r[0] + r[1]).sum();
    let l1 = (pr_a1 - e[1]) / (e[0] - e[1]);
    let mixing = [l1, 1.0 - l1];
    if mixing.iter().any(|l| *l < -SIMPLEX_TOL || *l > 1.0 + SIMPLEX_TOL) {
        return Err(Error::Identification(format!(
            "inconsistent candidate: class masses {mixing:?} fall outside [0, 1]"
        )));
    }
    Ok(EigenCandidate {
        eigenvalues: e,
        columns,
        mixing,
        proxy,
        warnings,
    })
}

/// Index of the candidate that the condition labels `A* = 1`.
pub fn resolve_label(cand: &EigenCandidate, condition: LabelCondition) -> usize {
    condition.pick(cand.eigenvalues, cand.mixing)
}

fn check_unit(name: &str, v: f64) -> Result<f64> {
    if !(v > -SIMPLEX_TOL && v < 1.0 + SIMPLEX_TOL) {
        return Err(Error::Identification(format!("{name} = {v:.6} is not a probability")));
    }
    Ok(v.clamp(0.0, 1.0))
}

/// Labelled latent law from an observed table.
pub fn identify_stratum(joint: &JointTable, condition: LabelCondition) -> Result<IdentifiedStratum> {
    let cand = eigen_candidates(joint)?;
    let one = resolve_label(&cand, condition);
    let idx = [1 - one, one];
    let mut p_y = Vec::with_capacity(joint.k());
    for (r, col) in cand.columns.iter().enumerate() {
        p_y.push([
            check_unit(&format!("pr(Y={r}|A*=0)"), col[idx[0]])?,
            check_unit(&format!("pr(Y={r}|A*=1)"), col[idx[1]])?,
        ]);
    }
    Ok(IdentifiedStratum {
        pi: check_unit("pr(A*=1)", cand.mixing[one])?,
        p_y,
        p_a: [
            check_unit("pr(A=1|A*=0)", cand.eigenvalues[idx[0]])?,
            check_unit("pr(A=1|A*=1)", cand.eigenvalues[idx[1]])?,
        ],
        p_z: [
            check_unit("pr(Z=1|A*=0)", cand.proxy[idx[0]])?,
            check_unit("pr(Z=1|A*=1)", cand.proxy[idx[1]])?,
        ],
        warnings: cand.warnings,
    })
}

/// Identifies every stratum of a law from its exact observed joint.
pub fn identify_law(law: &DiscreteLaw, condition: LabelCondition) -> Result<Vec<IdentifiedStratum>> {
    crate::law::exact_joint(law)
        .iter()
        .map(|j| identify_stratum(j, condition))
        .collect()
}

/// Latent law recovered from a continuous outcome; arrays are indexed by `A*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousIdentified {
    pub pi: f64,
    /// E(Y | A* = s).
    pub outcome_mean: [f64; 2],
    pub p_a: [f64; 2],
    pub p_z: [f64; 2],
}

/// Identification from `p_az[a][z]` = pr(A=a, Z=z) and `ybar[a][z]` = E(Y | A=a, Z=z):
/// `{E(Y|A,Z) * P(A,Z)} P(A,Z)^{-1}` has the class outcome means as eigenvalues and the
/// surrogate columns as eigenvectors.
pub fn identify_continuous(p_az: [[f64; 2]; 2], ybar: [[f64; 2]; 2], condition: LabelCondition) -> Result<ContinuousIdentified> {
    let total: f64 = p_az.iter().flatten().sum();
    let p: M2 = [
        [p_az[0][0] / total, p_az[0][1] / total],
        [p_az[1][0] / total, p_az[1][1] / total],
    ];
    if det2(&p).abs() < DET_TOL {
        return Err(Error::Identification(format!(
            "determinant of P(A,Z) is {:.3e} (about zero)",
            det2(&p)
        )));
    }
    let q: M2 = [
        [ybar[0][0] * p[0][0], ybar[0][1] * p[0][1]],
        [ybar[1][0] * p[1][0], ybar[1][1] * p[1][1]],
    ];
    let m = mul2(&q, &inv2(&p));
    let mut warnings = Vec::new();
    let (ey, v) = eigen2(&m, &mut warnings).map_err(|e| match e {
        Error::Identification(msg) => Error::Identification(format!("{msg}; E(Y|A*) does not separate the classes")),
        other => other,
    })?;
    // Columns of v are (pr(A=0|j), pr(A=1|j)).
    let e = [v[1][0], v[1][1]];
    let w = mul2(&inv2(&v), &p);
    let mass = [w[0][0] + w[0][1], w[1][0] + w[1][1]];
    let one = condition.pick(e, mass);
    let idx = [1 - one, one];
    Ok(ContinuousIdentified {
        pi: check_unit("pr(A*=1)", mass[one])?,
        outcome_mean: [ey[idx[0]], ey[idx[1]]],
        p_a: [check_unit("pr(A=1|A*=0)", e[idx[0]])?, check_unit("pr(A=1|A*=1)", e[idx[1]])?],
        p_z: [
            check_unit("pr(Z=1|A*=0)", w[idx[0]][1] / mass[idx[0]])?,
            check_unit("pr(Z=1|A*=1)", w[idx[1]][1] / mass[idx[1]])?,
        ],
    })
}

/// Identified law of one covariate stratum of a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleStratum {
    pub x: Vec<f64>,
    pub n: usize,
    pub law: IdentifiedStratum,
}

/// Empirical identification for a discrete outcome, stratum by stratum over the
/// distinct covariate rows (one stratum when there are no covariates).
pub fn identify_sample(data: &ObservedDataset, condition: LabelCondition) -> Result<Vec<SampleStratum>> {
    let k = data
        .kind()
        .levels()
        .ok_or_else(|| Error::Validation("identification from cell counts needs a discrete outcome".into()))?;
    let mut keys: Vec<Vec<f64>> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for i in 0..data.n() {
        let x = data.x_row(i);
        match keys.iter().position(|kx| kx.as_slice() == x) {
            Some(j) => members[j].push(i),
            None => {
                keys.push(x.to_vec());
                members.push(vec![i]);
            }
        }
    }
    keys.into_iter()
        .zip(members)
        .map(|(x, idx)| {
            let table = JointTable::from_counts(k, idx.iter().map(|&i| (data.level(i).unwrap_or(0), data.a()[i], data.z()[i])));
            let law = identify_stratum(&table, condition)
                .map_err(|e| match e {
                    Error::Identification(m) => Error::Identification(format!("stratum x = {x:?} ({} units): {m}", idx.len())),
                    other => other,
                })?;
            Ok(SampleStratum { x, n: idx.len(), law })
        })
        .collect()
}

/// Relevance check on a sample, pooled over covariates: |det P(Y,Z)| for a discrete
/// outcome, |det P(A,Z)| for a continuous one. Fails when it is about zero.
pub fn relevance_check(data: &ObservedDataset) -> Result<f64> {
    match data.kind().levels() {
        Some(k) => {
            let rows = (0..data.n()).map(|i| (data.level(i).unwrap_or(0), data.a()[i], data.z()[i]));
            relevance_determinant(&JointTable::from_counts(k, rows))
        }
        None => {
            let mut p = [[0.0; 2]; 2];
            for i in 0..data.n() {
                p[data.a()[i] as usize][data.z()[i] as usize] += 1.0 / data.n() as f64;
            }
            let det = det2(&p).abs();
            if det < DET_TOL {
                return Err(Error::Identification(format!(
                    "determinant of P(A,Z) is {det:.3e} (about zero): surrogate and proxy are unrelated"
                )));
            }
            Ok(det)
        }
    }
}

/// Population bias of the surrogate-as-treatment contrast for arm `s`:
/// E_X[{E(Y|A*=1-s,X) - E(Y|A*=s,X)} pr(A*=1-s | A=s, X)].
pub fn naive_bias(law: &DiscreteLaw, s: usize) -> f64 {
    let t = 1 - s;
    law.strata
        .iter()
        .zip(&law.stratum_weights)
        .map(|(st, w)| {
            let wrong = st.prior(t) * st.pa(s, t);
            let right = st.prior(s) * st.pa(s, s);
            let flip = wrong / (wrong + right);
            w * (st.outcome_mean(law.kind, t) - st.outcome_mean(law.kind, s)) * flip
        })
        .sum()
}
