//! Fully discrete laws of `(Y, A, Z, A*)` given a finite set of covariate cells.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ObservedDataset, OutcomeKind};
use crate::error::{Error, Result};

const RELEVANCE_TOL: f64 = 1e-9;

/// Conditional law within one covariate cell. Arrays of length two are indexed by the
/// value of `A*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumLaw {
    pub x: Vec<f64>,
    /// pr(A* = 1 | X).
    pub pi: f64,
    /// `p_y[r][s]` = pr(Y = level r | A* = s, X).
    pub p_y: Vec<[f64; 2]>,
    /// `p_a[s]` = pr(A = 1 | A* = s, X).
    pub p_a: [f64; 2],
    /// `p_z[s]` = pr(Z = 1 | A* = s, X).
    pub p_z: [f64; 2],
}

impl StratumLaw {
    /// Binary outcome; `py1[s]` = pr(Y = 1 | A* = s).
    pub fn binary(x: Vec<f64>, pi: f64, py1: [f64; 2], p_a: [f64; 2], p_z: [f64; 2]) -> Self {
        Self {
            x,
            pi,
            p_y: vec![[1.0 - py1[0], 1.0 - py1[1]], py1],
            p_a,
            p_z,
        }
    }

    pub fn k(&self) -> usize {
        self.p_y.len()
    }

    pub fn prior(&self, s: usize) -> f64 {
        if s == 1 {
            self.pi
        } else {
            1.0 - self.pi
        }
    }

    /// E(Y | A* = s, X).
    pub fn outcome_mean(&self, kind: OutcomeKind, s: usize) -> f64 {
        self.p_y
            .iter()
            .enumerate()
            .map(|(r, p)| kind.level_value(r) * p[s])
            .sum()
    }

    /// pr(A = a | A* = s).
    pub fn pa(&self, a: usize, s: usize) -> f64 {
        bern(self.p_a[s], a)
    }

    /// pr(Z = z | A* = s).
    pub fn pz(&self, z: usize, s: usize) -> f64 {
        bern(self.p_z[s], z)
    }

    /// pr(Y = r, A = a, Z = z, A* = s | X).
    pub fn latent_cell(&self, r: usize, a: usize, z: usize, s: usize) -> f64 {
        self.prior(s) * self.p_y[r][s] * self.pa(a, s) * self.pz(z, s)
    }

    /// Same law with the two latent labels exchanged.
    pub fn relabeled(&self) -> Self {
        Self {
            x: self.x.clone(),
            pi: 1.0 - self.pi,
            p_y: self.p_y.iter().map(|p| [p[1], p[0]]).collect(),
            p_a: [self.p_a[1], self.p_a[0]],
            p_z: [self.p_z[1], self.p_z[0]],
        }
    }

    /// Draws a well-conditioned stratum: probabilities in [0.05, 0.95], the two latent
    /// classes separated by at least 0.1 in A, Z and in some outcome level, and
    /// pr(A = 1 | A* = 1) > pr(A = 1 | A* = 0).
    pub fn random<R: Rng>(rng: &mut R, k: usize, x: Vec<f64>) -> Self {
        let pair = |rng: &mut R| loop {
            let p: [f64; 2] = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
            if (p[0] - p[1]).abs() >= 0.1 {
                return p;
            }
        };
        let mut p_a = pair(rng);
        if p_a[1] < p_a[0] {
            p_a.swap(0, 1);
        }
        let p_z = pair(rng);
        let p_y = loop {
            let mut cols = [vec![0.0; k], vec![0.0; k]];
            for col in cols.iter_mut() {
                for v in col.iter_mut() {
                    *v = rng.gen_range(0.2..1.0);
                }
                let s: f64 = col.iter().sum();
                col.iter_mut().for_each(|v| *v /= s);
            }
            let sep = (0..k).map(|r| (cols[0][r] - cols[1][r]).abs()).fold(0.0, f64::max);
            if sep >= 0.1 {
                break (0..k).map(|r| [cols[0][r], cols[1][r]]).collect::<Vec<_>>();
            }
        };
        Self {
            x,
            pi: rng.gen_range(0.1..0.9),
            p_y,
            p_a,
            p_z,
        }
    }

    fn validate(&self, k: usize, d: usize) -> Result<()> {
        if self.x.len() != d {
            return Err(Error::Validation("strata disagree on covariate dimension".into()));
        }
        if self.k() != k {
            return Err(Error::Validation(format!(
                "stratum has {} outcome levels, expected {k}",
                self.k()
            )));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let all = [self.pi, self.p_a[0], self.p_a[1], self.p_z[0], self.p_z[1]];
        if !all.iter().all(|&v| unit(v)) || !self.p_y.iter().flatten().all(|&v| unit(v)) {
            return Err(Error::Validation("probability outside [0, 1]".into()));
        }
        for s in 0..2 {
            let tot: f64 = self.p_y.iter().map(|p| p[s]).sum();
            if (tot - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!("outcome column {s} sums to {tot}")));
            }
        }
        let y_sep = self.p_y.iter().map(|p| (p[0] - p[1]).abs()).fold(0.0, f64::max);
        if y_sep <= RELEVANCE_TOL {
            return Err(Error::Validation("outcome law does not depend on the latent treatment".into()));
        }
        if (self.p_a[0] - self.p_a[1]).abs() <= RELEVANCE_TOL {
            return Err(Error::Validation("surrogate does not depend on the latent treatment".into()));
        }
        if (self.p_z[0] - self.p_z[1]).abs() <= RELEVANCE_TOL {
            return Err(Error::Validation("proxy does not depend on the latent treatment".into()));
        }
        Ok(())
    }
}

fn bern(p1: f64, v: usize) -> f64 {
    if v == 1 {
        p1
    } else {
        1.0 - p1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteLaw {
    pub kind: OutcomeKind,
    pub strata: Vec<StratumLaw>,
    pub stratum_weights: Vec<f64>,
}

impl DiscreteLaw {
    /// Validated constructor. Requires relevance of Y, A and Z in every stratum.
    pub fn new(kind: OutcomeKind, strata: Vec<StratumLaw>, stratum_weights: Vec<f64>) -> Result<Self> {
        let law = Self::new_unchecked(kind, strata, stratum_weights)?;
        let k = kind
            .levels()
            .ok_or_else(|| Error::Validation("a discrete law needs a discrete outcome".into()))?;
        let d = law.strata[0].x.len();
        for s in &law.strata {
            s.validate(k, d)?;
        }
        Ok(law)
    }

    /// Only checks the stratum weights; relevance and normalisation are not enforced.
    pub fn new_unchecked(kind: OutcomeKind, strata: Vec<StratumLaw>, stratum_weights: Vec<f64>) -> Result<Self> {
        if strata.is_empty() || strata.len() != stratum_weights.len() {
            return Err(Error::Validation("need one weight per stratum".into()));
        }
        let tot: f64 = stratum_weights.iter().sum();
        if stratum_weights.iter().any(|w| *w < 0.0) || (tot - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("stratum weights sum to {tot}")));
        }
        Ok(Self {
            kind,
            strata,
            stratum_weights,
        })
    }

    pub fn single(kind: OutcomeKind, stratum: StratumLaw) -> Result<Self> {
        Self::new(kind, vec![stratum], vec![1.0])
    }

    pub fn k(&self) -> usize {
        self.strata[0].k()
    }

    /// Counterfactual mean E{Y^(s)} = sum over cells of w E(Y | A* = s, X).
    pub fn counterfactual_mean(&self, s: usize) -> f64 {
        self.strata
            .iter()
            .zip(&self.stratum_weights)
            .map(|(st, w)| w * st.outcome_mean(self.kind, s))
            .sum()
    }

    /// Label-exchanged law.
    pub fn relabeled(&self) -> Self {
        Self {
            kind: self.kind,
            strata: self.strata.iter().map(StratumLaw::relabeled).collect(),
            stratum_weights: self.stratum_weights.clone(),
        }
    }
}

/// Observed-data table `pr(Y = r, A = a, Z = z | X)` for one stratum.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTable {
    /// `cells[r][a][z]`.
    pub cells: Vec<[[f64; 2]; 2]>,
}

impl JointTable {
    pub fn k(&self) -> usize {
        self.cells.len()
    }

    pub fn total(&self) -> f64 {
        self.cells.iter().flatten().flatten().sum()
    }

    /// Empirical table from counts; rows with `level = None` are ignored.
    pub fn from_counts(k: usize, rows: impl IntoIterator<Item = (usize, u8, u8)>) -> Self {
        let mut cells = vec![[[0.0; 2]; 2]; k];
        let mut n = 0.0;
        for (r, a, z) in rows {
            cells[r][a as usize][z as usize] += 1.0;
            n += 1.0;
        }
        if n > 0.0 {
            cells.iter_mut().flatten().flatten().for_each(|c| *c /= n);
        }
        Self { cells }
    }
}

/// Exact observed joint per stratum, obtained by summing the latent treatment out.
pub fn exact_joint(law: &DiscreteLaw) -> Vec<JointTable> {
    law.strata.iter().map(stratum_joint).collect()
}

pub fn stratum_joint(st: &StratumLaw) -> JointTable {
    let cells = (0..st.k())
        .map(|r| {
            let mut t = [[0.0; 2]; 2];
            for (a, row) in t.iter_mut().enumerate() {
                for (z, c) in row.iter_mut().enumerate() {
                    *c = (0..2).map(|s| st.latent_cell(r, a, z, s)).sum();
                }
            }
            t
        })
        .collect();
    JointTable { cells }
}

/// Draws `n` units; returns the observed data and the latent treatment.
pub fn forward_sample<R: Rng>(law: &DiscreteLaw, n: usize, rng: &mut R) -> Result<(ObservedDataset, Vec<u8>)> {
    if n == 0 {
        return Err(Error::Validation("sample size must be positive".into()));
    }
    let d = law.strata[0].x.len();
    let cum: Vec<f64> = law
        .stratum_weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let (mut y, mut a, mut z, mut x, mut latent) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n * d),
        Vec::with_capacity(n),
    );
    for _ in 0..n {
        let u: f64 = rng.gen();
        let c = cum.iter().position(|&c| u < c).unwrap_or(cum.len() - 1);
        let st = &law.strata[c];
        let s = usize::from(rng.gen::<f64>() < st.pi);
        let ai = u8::from(rng.gen::<f64>() < st.p_a[s]);
        let zi = u8::from(rng.gen::<f64>() < st.p_z[s]);
        let v: f64 = rng.gen();
        let mut acc = 0.0;
        let mut r = st.k() - 1;
        for (lvl, p) in st.p_y.iter().enumerate() {
            acc += p[s];
            if v < acc {
                r = lvl;
                break;
            }
        }
        y.push(law.kind.level_value(r));
        a.push(ai);
        z.push(zi);
        x.extend_from_slice(&st.x);
        latent.push(s as u8);
    }
    Ok((ObservedDataset::new(law.kind, y, a, z, x, d)?, latent))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn fixture() -> DiscreteLaw {
        DiscreteLaw::single(
            OutcomeKind::Binary,
            StratumLaw::binary(vec![], 0.4, [0.3, 0.7], [0.2, 0.8], [0.9, 0.3]),
        )
        .unwrap()
    }

    #[test]
    fn joint_sums_to_one() {
        let j = &exact_joint(&fixture())[0];
        assert!((j.total() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn relevance_violation_rejected() {
        let st = StratumLaw::binary(vec![], 0.4, [0.5, 0.5], [0.2, 0.8], [0.9, 0.3]);
        assert!(DiscreteLaw::single(OutcomeKind::Binary, st.clone()).is_err());
        assert!(DiscreteLaw::new_unchecked(OutcomeKind::Binary, vec![st], vec![1.0]).is_ok());
    }

    #[test]
    fn forward_sample_is_reproducible() {
        let law = fixture();
        let a = forward_sample(&law, 50, &mut stream_rng(7, 3)).unwrap();
        let b = forward_sample(&law, 50, &mut stream_rng(7, 3)).unwrap();
        let c = forward_sample(&law, 50, &mut stream_rng(7, 4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn forward_sample_frequencies_match_joint() {
        let law = fixture();
        let n = 200_000;
        let (data, _) = forward_sample(&law, n, &mut stream_rng(1, 0)).unwrap();
        let emp = JointTable::from_counts(2, (0..n).map(|i| (data.level(i).unwrap(), data.a()[i], data.z()[i])));
        let exact = &exact_joint(&law)[0];
        for r in 0..2 {
            for a in 0..2 {
                for z in 0..2 {
                    let p = exact.cells[r][a][z];
                    let se = (p * (1.0 - p) / n as f64).sqrt();
                    assert!((emp.cells[r][a][z] - p).abs() < 5.0 * se);
                }
            }
        }
    }
}
