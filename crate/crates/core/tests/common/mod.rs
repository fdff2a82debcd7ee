#![allow(dead_code)]

use hidtreat::law::{DiscreteLaw, StratumLaw};
use hidtreat::{OutcomeKind, UnitNuisance};
use rand::Rng;

pub fn random_law<R: Rng>(rng: &mut R, kind: OutcomeKind, strata: usize) -> DiscreteLaw {
    let k = kind.levels().unwrap();
    let st: Vec<StratumLaw> = (0..strata)
        .map(|j| StratumLaw::random(rng, k, vec![j as f64]))
        .collect();
    let mut w: Vec<f64> = (0..strata).map(|_| rng.gen_range(0.2..1.0)).collect();
    let tot: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= tot);
    DiscreteLaw::new(kind, st, w).unwrap()
}

/// True nuisances of a stratum.
pub fn stratum_nuisance(kind: OutcomeKind, st: &StratumLaw) -> UnitNuisance {
    UnitNuisance {
        propensity: st.pi,
        surrogate: st.p_a,
        proxy: st.p_z,
        outcome: [st.outcome_mean(kind, 0), st.outcome_mean(kind, 1)],
    }
}

/// Sum of `f(r, a, z, s) * pr(Y = r, A = a, Z = z, A* = s | X)` over one stratum.
pub fn latent_sum(st: &StratumLaw, mut f: impl FnMut(usize, u8, u8, usize) -> f64) -> f64 {
    let mut tot = 0.0;
    for r in 0..st.k() {
        for a in 0..2u8 {
            for z in 0..2u8 {
                for s in 0..2 {
                    tot += st.latent_cell(r, a as usize, z as usize, s) * f(r, a, z, s);
                }
            }
        }
    }
    tot
}

pub fn bern(p1: f64, v: u8) -> f64 {
    if v == 1 {
        p1
    } else {
        1.0 - p1
    }
}

use hidtreat::estimators::{influence_value, m_weight};
use hidtreat::functionals::{ett_if, indicator_pair, m_pair, msm_if, qte_if, semilinear_if, Link};

/// Largest |E{M_s | A* = t, X} - I(t = s)| over strata, arms and latent values.
pub fn m_weight_error(law: &DiscreteLaw) -> f64 {
    let mut worst: f64 = 0.0;
    for st in &law.strata {
        let u = stratum_nuisance(law.kind, st);
        for s in 0..2 {
            for t in 0..2 {
                let mut e = 0.0;
                for a in 0..2u8 {
                    for z in 0..2u8 {
                        e += st.pa(a as usize, t) * st.pz(z as usize, t) * m_weight(a, z, &u, s, 0.0).m;
                    }
                }
                let want = if s == t { 1.0 } else { 0.0 };
                worst = worst.max((e - want).abs());
            }
        }
    }
    worst
}

fn nudge(p: f64, d: f64) -> f64 {
    let q = p + d;
    if (0.02..=0.98).contains(&q) {
        q
    } else {
        p - d
    }
}

/// Which working models are replaced by wrong ones.
#[derive(Debug, Clone, Copy)]
pub struct Wrong {
    pub prior: bool,
    pub surrogate: bool,
    pub proxy: bool,
    pub outcome: bool,
}

pub const INSIDE: [Wrong; 3] = [
    // surrogate and outcome models correct
    Wrong { prior: true, surrogate: false, proxy: true, outcome: false },
    // proxy and outcome models correct
    Wrong { prior: true, surrogate: true, proxy: false, outcome: false },
    // surrogate, proxy and treatment models correct
    Wrong { prior: false, surrogate: false, proxy: false, outcome: true },
];

pub const OUTSIDE: [Wrong; 2] = [
    Wrong { prior: false, surrogate: true, proxy: false, outcome: true },
    Wrong { prior: false, surrogate: false, proxy: true, outcome: true },
];

/// Nuisances with the selected models shifted by `d[..]` (magnitudes 0.1 to 0.3).
/// Both arms of a binary conditional law move together so their contrast survives.
pub fn perturb(u: &UnitNuisance, w: Wrong, d: [f64; 4]) -> UnitNuisance {
    let mut v = u.clone();
    if w.prior {
        v.propensity = nudge(u.propensity, d[0]);
    }
    if w.surrogate {
        v.surrogate = [nudge(u.surrogate[0], d[1]), nudge(u.surrogate[1], d[1])];
    }
    if w.proxy {
        v.proxy = [nudge(u.proxy[0], d[2]), nudge(u.proxy[1], d[2])];
    }
    if w.outcome {
        v.outcome = [u.outcome[0] + d[3], u.outcome[1] - d[3]];
    }
    v
}

/// Population mean of the influence function of E{Y^(s)} at the true value, computed
/// with per-stratum nuisances `nuis`.
pub fn mean_influence(law: &DiscreteLaw, nuis: &[UnitNuisance], s: usize) -> f64 {
    let psi = law.counterfactual_mean(s);
    law.strata
        .iter()
        .zip(&law.stratum_weights)
        .zip(nuis)
        .map(|((st, w), u)| {
            w * latent_sum(st, |r, a, z, _| {
                influence_value(law.kind.level_value(r), a, z, u, s, psi, 0.0)
            })
        })
        .sum()
}

/// Mean absolute influence value under the same weighting, the scale that rounding in
/// `mean_influence` is relative to.
pub fn influence_scale(law: &DiscreteLaw, nuis: &[UnitNuisance], s: usize) -> f64 {
    let psi = law.counterfactual_mean(s);
    law.strata
        .iter()
        .zip(&law.stratum_weights)
        .zip(nuis)
        .map(|((st, w), u)| {
            w * latent_sum(st, |r, a, z, _| {
                influence_value(law.kind.level_value(r), a, z, u, s, psi, 0.0).abs()
            })
        })
        .sum()
}

/// A scalar influence function written against per-arm weights, and a generic
/// vector-valued one, evaluated at `(y level, weights)` in one stratum.
pub type Phi<'a> = dyn Fn(usize, usize, [f64; 2]) -> Vec<f64> + 'a;

/// Largest gap in the three conditional-mean identities between the observed-data
/// influence function (weights M) and the full-data one (weights I(A* = s)):
/// conditioning on (Y, A*), on (A, A*) and on (Z, A*).
pub fn conditional_gap(st: &StratumLaw, u: &UnitNuisance, phi: &Phi) -> f64 {
    let k = st.k();
    let mut worst: f64 = 0.0;
    let sub = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let add = |acc: &mut Vec<f64>, v: Vec<f64>, w: f64| {
        if acc.is_empty() {
            *acc = vec![0.0; v.len()];
        }
        acc.iter_mut().zip(v).for_each(|(a, b)| *a += w * b);
    };
    for s in 0..2 {
        let full = |r: usize| phi(r, s, indicator_pair(s as u8));
        // given Y = r, A* = s
        for r in 0..k {
            let mut obs = Vec::new();
            for a in 0..2u8 {
                for z in 0..2u8 {
                    let w = st.pa(a as usize, s) * st.pz(z as usize, s);
                    add(&mut obs, phi(r, s, m_pair(a, z, u, 0.0)), w);
                }
            }
            worst = worst.max(sub(&obs, &full(r)));
        }
        // given A = a, A* = s
        for a in 0..2u8 {
            let (mut obs, mut fd) = (Vec::new(), Vec::new());
            for r in 0..k {
                for z in 0..2u8 {
                    let w = st.p_y[r][s] * st.pz(z as usize, s);
                    add(&mut obs, phi(r, s, m_pair(a, z, u, 0.0)), w);
                }
                add(&mut fd, full(r), st.p_y[r][s]);
            }
            worst = worst.max(sub(&obs, &fd));
        }
        // given Z = z, A* = s
        for z in 0..2u8 {
            let (mut obs, mut fd) = (Vec::new(), Vec::new());
            for r in 0..k {
                for a in 0..2u8 {
                    let w = st.p_y[r][s] * st.pa(a as usize, s);
                    add(&mut obs, phi(r, s, m_pair(a, z, u, 0.0)), w);
                }
                add(&mut fd, full(r), st.p_y[r][s]);
            }
            worst = worst.max(sub(&obs, &fd));
        }
    }
    worst
}

/// Conditional-mean identity gaps for the effect on the treated, the quantile
/// (indicator form), the semi-linear and the marginal structural model.
pub fn functional_gaps(law: &DiscreteLaw) -> [f64; 4] {
    let kind = law.kind;
    let k = law.k();
    let mut out = [0.0f64; 4];
    for st in &law.strata {
        let u = stratum_nuisance(kind, st);
        let yv = |r: usize| kind.level_value(r);
        let ett = |r: usize, _s: usize, w: [f64; 2]| vec![ett_if(yv(r), w, &u, 0.37, 0.45)];
        let theta_level = k / 2;
        let theta = yv(theta_level);
        let qte = |r: usize, _s: usize, w: [f64; 2]| {
            let eta1: f64 = (0..=theta_level).map(|q| st.p_y[q][1]).sum();
            vec![qte_if(yv(r), w, &u, 1, theta, eta1, 0.5)]
        };
        // The semi-linear model holds within a stratum at beta = mu_1 - mu_0.
        let beta = u.outcome[1] - u.outcome[0];
        let semi = |r: usize, _s: usize, w: [f64; 2]| vec![semilinear_if(yv(r), w, &u, beta, 1.3)];
        let v = [st.x.first().copied().unwrap_or(0.0)];
        let msm = |r: usize, _s: usize, w: [f64; 2]| msm_if(yv(r), w, &u, &v, &[0.1, 0.3, -0.2], Link::Logit);
        out[0] = out[0].max(conditional_gap(st, &u, &ett));
        out[1] = out[1].max(conditional_gap(st, &u, &qte));
        out[2] = out[2].max(conditional_gap(st, &u, &semi));
        out[3] = out[3].max(conditional_gap(st, &u, &msm));
    }
    out
}

use hidtreat::law::forward_sample;
use hidtreat::nuisance::{NuisanceSet, OutcomeLaw};
use hidtreat::ObservedDataset;

/// Index of the stratum whose covariate equals row `i`.
pub fn stratum_of(law: &DiscreteLaw, data: &ObservedDataset, i: usize) -> usize {
    law.strata.iter().position(|s| s.x == data.x_row(i)).expect("row matches a stratum")
}

/// True nuisances (with the full outcome law) at every unit of `data`.
pub fn true_set(law: &DiscreteLaw, data: &ObservedDataset) -> NuisanceSet {
    let idx: Vec<usize> = (0..data.n()).map(|i| stratum_of(law, data, i)).collect();
    let mut set = NuisanceSet::new(idx.iter().map(|&j| stratum_nuisance(law.kind, &law.strata[j])).collect());
    set.outcome_law = OutcomeLaw::Discrete {
        kind: law.kind,
        probs: idx.iter().map(|&j| law.strata[j].p_y.clone()).collect(),
    };
    set
}

pub fn sample_with_truth<R: Rng>(law: &DiscreteLaw, n: usize, rng: &mut R) -> (ObservedDataset, Vec<u8>, NuisanceSet) {
    let (data, latent) = forward_sample(law, n, rng).unwrap();
    let set = true_set(law, &data);
    (data, latent, set)
}

use hidtreat::efficiency::{build_basis, build_v, project, Projection};

/// Every observed cell `(stratum, level, a, z)` with its probability.
pub fn observed_cells(law: &DiscreteLaw) -> Vec<(usize, usize, u8, u8, f64)> {
    let mut out = Vec::new();
    for (j, st) in law.strata.iter().enumerate() {
        for r in 0..st.k() {
            for a in 0..2u8 {
                for z in 0..2u8 {
                    let p: f64 = (0..2).map(|s| st.latent_cell(r, a as usize, z as usize, s)).sum();
                    out.push((j, r, a, z, law.stratum_weights[j] * p));
                }
            }
        }
    }
    out
}

/// Projection of the influence function of E{Y^(s)} at the truth, with population
/// expectations taken by exact summation over observed cells.
pub fn exact_projection(law: &DiscreteLaw, s: usize) -> (Projection, Vec<Vec<f64>>, Vec<f64>) {
    let psi = law.counterfactual_mean(s);
    let cells = observed_cells(law);
    let nu: Vec<UnitNuisance> = law.strata.iter().map(|st| stratum_nuisance(law.kind, st)).collect();
    let phi: Vec<f64> = cells
        .iter()
        .map(|&(j, r, a, z, _)| influence_value(law.kind.level_value(r), a, z, &nu[j], s, psi, 0.0))
        .collect();
    let v: Vec<Vec<f64>> = cells
        .iter()
        .map(|&(j, r, a, z, _)| {
            let (p, _) = build_basis(r, &law.strata[j].p_y, 0.0);
            build_v(a, z, &nu[j], &p)
        })
        .collect();
    let w: Vec<f64> = cells.iter().map(|c| c.4).collect();
    (project(&phi, &v, Some(&w)).unwrap(), v, w)
}
