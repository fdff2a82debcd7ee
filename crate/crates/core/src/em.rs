//! Cross-fitted semiparametric EM for the nuisances of the latent treatment.
//!
//! Each M-step regresses the current posterior pr(A* = 1 | ...) on X alone and on
//! (V, X) for V in {Y, A, Z} with Nadaraya-Watson smoothers, then converts those maps
//! into conditional laws of V given (A*, X) by Bayes' rule:
//! pr(V | A*, X) = pr(V | X) p(A* | V, X) / p(A* | X).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::EstimatorConfig;
use crate::data::{ObservedDataset, OutcomeKind};
use crate::error::{Error, Result};
use crate::kernel::{silverman_bandwidth, ConditionalDensity, Standardizer, WeightMatrix};
use crate::nuisance::{NuisanceSet, OutcomeLaw, UnitNuisance};

const MAP_LO: f64 = 0.001;
const MAP_HI: f64 = 0.999;
const POST_LO: f64 = 1e-12;
const POST_HI: f64 = 1.0 - 1e-12;
const UNDERFLOW: f64 = 1e-300;
const COLLAPSE_LO: f64 = 0.02;
const COLLAPSE_HI: f64 = 0.98;

/// Random partition of the units into `k` folds of near-equal size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub fold_of: Vec<usize>,
    pub k: usize,
}

impl FoldAssignment {
    pub fn random<R: Rng>(n: usize, k: usize, rng: &mut R) -> Result<Self> {
        if k == 0 || (k > 1 && k > n) {
            return Err(Error::Validation(format!("cannot split {n} units into {k} folds")));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), rng);
        let mut fold_of = vec![0; n];
        for (t, &i) in perm.iter().enumerate() {
            fold_of[i] = t % k;
        }
        Ok(Self { fold_of, k })
    }

    /// No sample splitting: fit and evaluate on every unit.
    pub fn single(n: usize) -> Self {
        Self { fold_of: vec![0; n], k: 1 }
    }

    pub fn train(&self, j: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.k == 1 || self.fold_of[i] != j)
            .collect()
    }

    pub fn eval(&self, j: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == j).collect()
    }
}

/// Conditional laws of one EM iterate, evaluated at every unit. Pairs are indexed by
/// `A*`; `outcome[i][s]` is the likelihood factor of the observed `Y_i` (a probability
/// for discrete outcomes, a density ratio against f(Y_i | X_i) for continuous ones).
#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    pub prior: Vec<f64>,
    pub surrogate: Vec<[f64; 2]>,
    pub proxy: Vec<[f64; 2]>,
    pub outcome: Vec<[f64; 2]>,
}

/// Posterior pr(A* = 1 | Y, A, Z, X) from the four factors; `None` when both classes
/// have zero likelihood.
pub fn posterior_raw(prior1: f64, y: [f64; 2], a: [f64; 2], z: [f64; 2]) -> Option<f64> {
    let l1 = prior1 * y[1] * a[1] * z[1];
    let l0 = (1.0 - prior1) * y[0] * a[0] * z[0];
    let den = l1 + l0;
    if !(den > 0.0) || !den.is_finite() {
        return None;
    }
    Some(l1 / den)
}

fn bern_pair(p1: [f64; 2], v: u8) -> [f64; 2] {
    if v == 1 {
        p1
    } else {
        [1.0 - p1[0], 1.0 - p1[1]]
    }
}

/// E-step for every unit; returns the posterior clamped to `[1e-12, 1 - 1e-12]` and
/// the number of units that needed clamping or had no likelihood mass.
pub fn e_step(c: &Components, a: &[u8], z: &[u8]) -> (Vec<f64>, usize) {
    let mut clamps = 0;
    let p = (0..c.prior.len())
        .map(|i| {
            let raw = posterior_raw(
                c.prior[i],
                c.outcome[i],
                bern_pair(c.surrogate[i], a[i]),
                bern_pair(c.proxy[i], z[i]),
            );
            let v = raw.unwrap_or(c.prior[i]);
            let cl = v.clamp(POST_LO, POST_HI);
            if raw.is_none() || cl != v {
                clamps += 1;
            }
            cl
        })
        .collect();
    (p, clamps)
}

/// Smoothed posterior maps at every unit: p(A* = 1 | X_i) and p(A* = 1 | V = v, X_i).
#[derive(Debug, Clone, PartialEq)]
pub struct Maps {
    pub prior: Vec<f64>,
    /// Indexed by the value of A.
    pub surrogate: Vec<[f64; 2]>,
    pub proxy: Vec<[f64; 2]>,
    pub outcome: OutcomeMaps,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OutcomeMaps {
    /// `[i][r]` = p(A* = 1 | Y = level r, X_i).
    Discrete(Vec<Vec<f64>>),
    /// p(A* = 1 | Y_i, X_i).
    Continuous(Vec<f64>),
}

enum Smoother {
    Dense(WeightMatrix),
    /// No covariates: every row weights all training units equally.
    Global(Vec<f64>),
}

impl Smoother {
    fn row(&self, i: usize) -> &[f64] {
        match self {
            Smoother::Dense(w) => w.row(i),
            Smoother::Global(ones) => ones,
        }
    }

    fn is_global(&self) -> bool {
        matches!(self, Smoother::Global(_))
    }

    fn nearest(&self, i: usize) -> usize {
        match self {
            Smoother::Dense(w) => w.nearest(i),
            Smoother::Global(_) => 0,
        }
    }
}

struct ContinuousParts {
    s_weights: WeightMatrix,
    s_den: Vec<f64>,
    standardizer: Standardizer,
    hs: f64,
    density: ConditionalDensity,
}

/// Everything about one fold that stays fixed across EM iterations.
pub struct FoldContext<'a> {
    data: &'a ObservedDataset,
    train: Vec<usize>,
    smoother: Smoother,
    col_a: Vec<u8>,
    col_z: Vec<u8>,
    col_level: Vec<usize>,
    den_all: Vec<f64>,
    den_a1: Vec<f64>,
    den_z1: Vec<f64>,
    den_level: Vec<Vec<f64>>,
    /// pr(A = 1 | X_i), pr(Z = 1 | X_i) and, for discrete Y, pr(Y = r | X_i).
    pub marg_a1: Vec<f64>,
    pub marg_z1: Vec<f64>,
    pub marg_y: Vec<Vec<f64>>,
    continuous: Option<ContinuousParts>,
    pub fallbacks: usize,
}

impl<'a> FoldContext<'a> {
    pub fn new(data: &'a ObservedDataset, train: Vec<usize>, bandwidth_scale: f64) -> Result<Self> {
        let n = data.n();
        let m = train.len();
        let d = data.d();
        if m < 2 {
            return Err(Error::Validation("a fold needs at least two training units".into()));
        }
        let xt: Vec<f64> = train.iter().flat_map(|&i| data.x_row(i).iter().copied()).collect();
        let smoother = if d == 0 {
            Smoother::Global(vec![1.0; m])
        } else {
            let h = bandwidth_scale * silverman_bandwidth(&xt, m, d)?;
            Smoother::Dense(WeightMatrix::build_sized(data.x(), n, &xt, m, d, h))
        };
        let col_a: Vec<u8> = train.iter().map(|&i| data.a()[i]).collect();
        let col_z: Vec<u8> = train.iter().map(|&i| data.z()[i]).collect();
        let k = data.kind().levels().unwrap_or(0);
        let col_level: Vec<usize> = train.iter().map(|&i| data.level(i).unwrap_or(0)).collect();

        let rows = if smoother.is_global() { 1 } else { n };
        let mut den_all = vec![0.0; rows];
        let mut den_a1 = vec![0.0; rows];
        let mut den_z1 = vec![0.0; rows];
        let mut den_level = vec![vec![0.0; k]; rows];
        for i in 0..rows {
            let w = smoother.row(i);
            for t in 0..m {
                den_all[i] += w[t];
                if col_a[t] == 1 {
                    den_a1[i] += w[t];
                }
                if col_z[t] == 1 {
                    den_z1[i] += w[t];
                }
                if k > 0 {
                    den_level[i][col_level[t]] += w[t];
                }
            }
        }
        let expand = |v: &Vec<f64>| -> Vec<f64> {
            if rows == 1 {
                vec![v[0]; n]
            } else {
                v.clone()
            }
        };
        let den_all = expand(&den_all);
        let den_a1 = expand(&den_a1);
        let den_z1 = expand(&den_z1);
        let den_level = if rows == 1 { vec![den_level[0].clone(); n] } else { den_level };
        let mut fallbacks = 0;
        let mut ratio = |num: f64, den: f64, i: usize, col: &[u8]| -> f64 {
            if den < UNDERFLOW {
                fallbacks += 1;
                f64::from(col[smoother.nearest(i)])
            } else {
                num / den
            }
        };
        let marg_a1: Vec<f64> = (0..n).map(|i| ratio(den_a1[i], den_all[i], i, &col_a)).collect();
        let marg_z1: Vec<f64> = (0..n).map(|i| ratio(den_z1[i], den_all[i], i, &col_z)).collect();
        let marg_y: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                if den_all[i] < UNDERFLOW {
                    let mut v = vec![0.0; k];
                    if k > 0 {
                        v[col_level[smoother.nearest(i)]] = 1.0;
                    }
                    v
                } else {
                    den_level[i].iter().map(|c| c / den_all[i]).collect()
                }
            })
            .collect();

        let continuous = if data.kind() == OutcomeKind::Continuous {
            let yt: Vec<f64> = train.iter().map(|&i| data.y()[i]).collect();
            let mut aug_train = Vec::with_capacity(m * (d + 1));
            for (t, &i) in train.iter().enumerate() {
                aug_train.push(yt[t]);
                aug_train.extend_from_slice(data.x_row(i));
            }
            let standardizer = Standardizer::fit(&aug_train, m, d + 1)?;
            let mut aug_all = Vec::with_capacity(n * (d + 1));
            for i in 0..n {
                aug_all.push(data.y()[i]);
                aug_all.extend_from_slice(data.x_row(i));
            }
            let hs = bandwidth_scale * 1.06 * (m as f64).powf(-1.0 / (5.0 + d as f64));
            let s_weights = WeightMatrix::build_sized(
                &standardizer.apply(&aug_all),
                n,
                &standardizer.apply(&aug_train),
                m,
                d + 1,
                hs,
            );
            let s_den = (0..n).map(|i| s_weights.row(i).iter().sum()).collect();
            let density = ConditionalDensity::fit(xt, yt, d, bandwidth_scale)?;
            Some(ContinuousParts {
                s_weights,
                s_den,
                standardizer,
                hs,
                density,
            })
        } else {
            None
        };
        Ok(Self {
            data,
            train,
            smoother,
            col_a,
            col_z,
            col_level,
            den_all,
            den_a1,
            den_z1,
            den_level,
            marg_a1,
            marg_z1,
            marg_y,
            continuous,
            fallbacks,
        })
    }

    pub fn train(&self) -> &[usize] {
        &self.train
    }

    pub fn n(&self) -> usize {
        self.data.n()
    }
}

fn clamp_map(v: f64) -> f64 {
    v.clamp(MAP_LO, MAP_HI)
}

/// M-step: smooth the training posteriors `p` (one per unit, only training entries
/// are read). Outputs are clamped to `[0.001, 0.999]`; an arm with no kernel mass
/// at a unit falls back to that unit's p(A* = 1 | X).
pub fn m_step(p: &[f64], ctx: &FoldContext) -> Maps {
    let n = ctx.n();
    let k = ctx.den_level.first().map_or(0, |v| v.len());
    let pt: Vec<f64> = ctx.train.iter().map(|&i| p[i]).collect();
    let rows = if ctx.smoother.is_global() { 1 } else { n };
    let mut prior = vec![0.0; rows];
    let mut surrogate = vec![[0.0; 2]; rows];
    let mut proxy = vec![[0.0; 2]; rows];
    let mut levels = vec![vec![0.0; k]; rows];
    for i in 0..rows {
        let w = ctx.smoother.row(i);
        let (mut all, mut a1, mut z1) = (0.0, 0.0, 0.0);
        let mut lv = vec![0.0; k];
        for t in 0..pt.len() {
            let wp = w[t] * pt[t];
            all += wp;
            if ctx.col_a[t] == 1 {
                a1 += wp;
            }
            if ctx.col_z[t] == 1 {
                z1 += wp;
            }
            if k > 0 {
                lv[ctx.col_level[t]] += wp;
            }
        }
        let base = if ctx.den_all[i] < UNDERFLOW {
            pt[ctx.smoother.nearest(i)]
        } else {
            all / ctx.den_all[i]
        };
        let arm = |num: f64, den: f64| if den < UNDERFLOW { base } else { num / den };
        prior[i] = clamp_map(base);
        surrogate[i] = [
            clamp_map(arm(all - a1, ctx.den_all[i] - ctx.den_a1[i])),
            clamp_map(arm(a1, ctx.den_a1[i])),
        ];
        proxy[i] = [
            clamp_map(arm(all - z1, ctx.den_all[i] - ctx.den_z1[i])),
            clamp_map(arm(z1, ctx.den_z1[i])),
        ];
        for r in 0..k {
            levels[i][r] = clamp_map(arm(lv[r], ctx.den_level[i][r]));
        }
    }
    if rows == 1 {
        prior = vec![prior[0]; n];
        surrogate = vec![surrogate[0]; n];
        proxy = vec![proxy[0]; n];
        levels = vec![levels[0].clone(); n];
    }
    let outcome = match &ctx.continuous {
        Some(c) => OutcomeMaps::Continuous(
            (0..n)
                .map(|i| {
                    if c.s_den[i] < UNDERFLOW {
                        return prior[i];
                    }
                    let num: f64 = c.s_weights.row(i).iter().zip(&pt).map(|(w, p)| w * p).sum();
                    clamp_map(num / c.s_den[i])
                })
                .collect(),
        ),
        None => OutcomeMaps::Discrete(levels),
    };
    Maps {
        prior,
        surrogate,
        proxy,
        outcome,
    }
}

/// pr(V = v | A* = s, X) = pr(V = v | X) p(s | V = v, X) / p(s | X), before clamping.
pub fn bayes_component(marg_v: f64, map_v: f64, map_prior: f64, s: usize) -> f64 {
    let (num, den) = if s == 1 { (map_v, map_prior) } else { (1.0 - map_v, 1.0 - map_prior) };
    marg_v * num / den
}

fn bernoulli_component(marg1: f64, map1: f64, prior: f64) -> [f64; 2] {
    [bayes_component(marg1, map1, prior, 0), bayes_component(marg1, map1, prior, 1)]
}

/// Converts maps into conditional laws. Returns the unclamped components.
pub fn probability_update_raw(maps: &Maps, ctx: &FoldContext) -> Components {
    let n = ctx.n();
    let data = ctx.data;
    let outcome = (0..n)
        .map(|i| match &maps.outcome {
            OutcomeMaps::Discrete(lv) => {
                let r = data.level(i).unwrap_or(0);
                bernoulli_component(ctx.marg_y[i][r], lv[i][r], maps.prior[i])
            }
            OutcomeMaps::Continuous(q) => bernoulli_component(1.0, q[i], maps.prior[i]),
        })
        .collect();
    Components {
        prior: maps.prior.clone(),
        surrogate: (0..n)
            .map(|i| bernoulli_component(ctx.marg_a1[i], maps.surrogate[i][1], maps.prior[i]))
            .collect(),
        proxy: (0..n)
            .map(|i| bernoulli_component(ctx.marg_z1[i], maps.proxy[i][1], maps.prior[i]))
            .collect(),
        outcome,
    }
}

/// [`probability_update_raw`] followed by clamping Bernoulli and discrete outcome
/// probabilities to `[0.001, 0.999]`; also returns the number of clamped values.
pub fn probability_update(maps: &Maps, ctx: &FoldContext) -> (Components, usize) {
    let mut c = probability_update_raw(maps, ctx);
    let mut count = 0;
    let mut clamp = |v: &mut f64| {
        let cl = clamp_map(*v);
        if cl != *v {
            count += 1;
            *v = cl;
        }
    };
    for i in 0..c.prior.len() {
        for s in 0..2 {
            clamp(&mut c.surrogate[i][s]);
            clamp(&mut c.proxy[i][s]);
            if matches!(maps.outcome, OutcomeMaps::Discrete(_)) {
                clamp(&mut c.outcome[i][s]);
            }
        }
    }
    (c, count)
}

/// Full table pr(Y = r | A* = s, X_i) for a discrete outcome, renormalised over r.
fn outcome_table(maps: &Maps, ctx: &FoldContext, i: usize) -> Vec<[f64; 2]> {
    let OutcomeMaps::Discrete(lv) = &maps.outcome else {
        return Vec::new();
    };
    let k = lv[i].len();
    let mut t: Vec<[f64; 2]> = (0..k)
        .map(|r| bernoulli_component(ctx.marg_y[i][r], lv[i][r], maps.prior[i]))
        .collect();
    for s in 0..2 {
        let tot: f64 = t.iter().map(|p| p[s]).sum();
        if tot > 0.0 {
            t.iter_mut().for_each(|p| p[s] /= tot);
        }
    }
    t
}

/// Departures from the textbook kernel formulas, carried into reports.
pub fn deviation_flags(kind: OutcomeKind) -> Vec<String> {
    match kind {
        OutcomeKind::Continuous => vec![
            "outcome-covariate kernel distances use y and x standardised to unit SD".into(),
            "conditional outcome weights are self-normalised over the training outcomes".into(),
        ],
        _ => Vec::new(),
    }
}

/// Starting point of the EM iterations.
#[derive(Debug, Clone, PartialEq)]
pub enum EmInit {
    /// pr(A* = 1 | X) = 1/2, pr(A = 1 | A* = s, X) = 1/2 -/+ u with u ~ U(0.1, 0.3);
    /// proxy and outcome start at their smoothed marginals, i.e. carry no
    /// information, so the first posterior is driven by the surrogate alone.
    Default,
    /// The same conditional law at every unit. `outcome[r][s]` = pr(Y = r | A* = s)
    /// for discrete outcomes; `None` starts the outcome at its marginal.
    Fixed {
        prior: f64,
        surrogate: [f64; 2],
        proxy: [f64; 2],
        outcome: Option<Vec<[f64; 2]>>,
    },
}

impl EmInit {
    /// Label-exchanged version of a fixed start.
    pub fn swapped(&self) -> Self {
        match self {
            EmInit::Default => EmInit::Default,
            EmInit::Fixed {
                prior,
                surrogate,
                proxy,
                outcome,
            } => EmInit::Fixed {
                prior: 1.0 - prior,
                surrogate: [surrogate[1], surrogate[0]],
                proxy: [proxy[1], proxy[0]],
                outcome: outcome.as_ref().map(|t| t.iter().map(|p| [p[1], p[0]]).collect()),
            },
        }
    }

    fn components(&self, ctx: &FoldContext, u: f64) -> Components {
        let n = ctx.n();
        let data = ctx.data;
        let marginal_outcome = |i: usize| -> [f64; 2] {
            match data.level(i) {
                Some(r) if data.kind() != OutcomeKind::Continuous => [ctx.marg_y[i][r]; 2],
                _ => [1.0, 1.0],
            }
        };
        match self {
            EmInit::Default => Components {
                prior: vec![0.5; n],
                surrogate: vec![[0.5 - u, 0.5 + u]; n],
                proxy: ctx.marg_z1.iter().map(|&q| [q, q]).collect(),
                outcome: (0..n).map(marginal_outcome).collect(),
            },
            EmInit::Fixed {
                prior,
                surrogate,
                proxy,
                outcome,
            } => Components {
                prior: vec![*prior; n],
                surrogate: vec![*surrogate; n],
                proxy: vec![*proxy; n],
                outcome: (0..n)
                    .map(|i| match (outcome, data.level(i)) {
                        (Some(t), Some(r)) if data.kind() != OutcomeKind::Continuous => t[r],
                        _ => marginal_outcome(i),
                    })
                    .collect(),
            },
        }
    }
}

/// Bookkeeping from one EM fit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmDiagnostics {
    /// Iterations used by each fold.
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
    pub restarts: usize,
    pub clamped: usize,
    pub kernel_fallbacks: usize,
    /// Folds whose labels were exchanged to satisfy the labelling rule.
    pub relabeled_folds: usize,
    pub warnings: Vec<String>,
}

impl EmDiagnostics {
    pub fn max_iterations(&self) -> usize {
        self.iterations.iter().copied().max().unwrap_or(0)
    }
}

/// State of one fold after EM.
pub struct FoldFit {
    pub components: Components,
    pub maps: Maps,
    /// Posterior used to fit `maps`.
    pub fitted_on: Vec<f64>,
    /// Posterior after the last E-step.
    pub posterior: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub clamped: usize,
    /// Sup-norm change of the training posterior at each iteration.
    pub trace: Vec<f64>,
}

/// Iterates E and M steps on one fold from a given start.
pub fn fit_fold(ctx: &FoldContext, init: &EmInit, u: f64, threshold: f64, max_iters: usize) -> FoldFit {
    let data = ctx.data;
    let mut comps = init.components(ctx, u);
    let (mut p, mut clamped) = e_step(&comps, data.a(), data.z());
    let mut trace = Vec::new();
    let mut maps = m_step(&p, ctx);
    let mut fitted_on = p.clone();
    let mut converged = false;
    for _ in 0..max_iters {
        maps = m_step(&p, ctx);
        fitted_on = p.clone();
        let (c, cl) = probability_update(&maps, ctx);
        comps = c;
        let (p_new, cl2) = e_step(&comps, data.a(), data.z());
        clamped += cl + cl2;
        let delta = ctx
            .train
            .iter()
            .map(|&i| (p_new[i] - p[i]).abs())
            .fold(0.0, f64::max);
        p = p_new;
        trace.push(delta);
        if delta < threshold {
            converged = true;
            break;
        }
    }
    FoldFit {
        components: comps,
        maps,
        fitted_on,
        posterior: p,
        iterations: trace.len(),
        converged,
        clamped,
        trace,
    }
}

fn collapsed(fit: &FoldFit, train: &[usize]) -> bool {
    let mean = train.iter().map(|&i| fit.posterior[i]).sum::<f64>() / train.len() as f64;
    !(COLLAPSE_LO..=COLLAPSE_HI).contains(&mean)
}

/// Continuous outcome: point masses on the fold's training outcomes,
/// `w_l(s, X_i)` proportional to f(Y_l | X_i) p(A* = s | Y_l, X_i).
fn continuous_weights(ctx: &FoldContext, fit: &FoldFit, eval: &[usize]) -> (Vec<f64>, Vec<[Vec<f64>; 2]>) {
    let c = ctx.continuous.as_ref().expect("continuous outcome");
    let data = ctx.data;
    let d = data.d();
    let m = ctx.train.len();
    let yt: Vec<f64> = ctx.train.iter().map(|&i| data.y()[i]).collect();
    let pt: Vec<f64> = ctx.train.iter().map(|&i| fit.fitted_on[i]).collect();

    let xe: Vec<f64> = eval.iter().flat_map(|&i| data.x_row(i).iter().copied()).collect();
    let xt: Vec<f64> = ctx.train.iter().flat_map(|&i| data.x_row(i).iter().copied()).collect();
    let density = match &ctx.smoother {
        Smoother::Dense(_) => {
            let kx = WeightMatrix::build_sized(&xe, eval.len(), &xt, m, d, c.density.hx);
            c.density.density_matrix(&kx, &yt)
        }
        Smoother::Global(_) => {
            let kx = WeightMatrix::build_sized(&[], eval.len(), &[], m, 0, 1.0);
            c.density.density_matrix(&kx, &yt)
        }
    };

    // Standardised kernel factorises into an x part and a y part.
    let std = &c.standardizer;
    let scale_x = |row: &[f64]| -> Vec<f64> {
        row.iter().enumerate().map(|(j, v)| (v - std.mean[j + 1]) / std.sd[j + 1]).collect()
    };
    let xe_s: Vec<f64> = eval.iter().flat_map(|&i| scale_x(data.x_row(i))).collect();
    let xt_s: Vec<f64> = ctx.train.iter().flat_map(|&i| scale_x(data.x_row(i))).collect();
    let yt_s: Vec<f64> = yt.iter().map(|y| (y - std.mean[0]) / std.sd[0]).collect();
    let kxs = WeightMatrix::build_sized(&xe_s, eval.len(), &xt_s, m, d, c.hs).as_array();
    let kys = WeightMatrix::build_sized(&yt_s, m, &yt_s, m, 1, c.hs).as_array();
    let mut kxs_p = kxs.clone();
    for mut row in kxs_p.rows_mut() {
        row.iter_mut().zip(&pt).for_each(|(w, p)| *w *= p);
    }
    let num = kxs_p.dot(&kys.t());
    let den = kxs.dot(&kys.t());

    let mut weights = Vec::with_capacity(eval.len());
    for (e, &i) in eval.iter().enumerate() {
        let mut w = [vec![0.0; m], vec![0.0; m]];
        for l in 0..m {
            let q = if den[[e, l]] < UNDERFLOW {
                fit.maps.prior[i]
            } else {
                clamp_map(num[[e, l]] / den[[e, l]])
            };
            let f = density[[e, l]];
            w[0][l] = f * (1.0 - q);
            w[1][l] = f * q;
        }
        for ws in w.iter_mut() {
            let tot: f64 = ws.iter().sum();
            if tot > 0.0 {
                ws.iter_mut().for_each(|v| *v /= tot);
            } else {
                ws.iter_mut().for_each(|v| *v = 1.0 / m as f64);
            }
        }
        weights.push(w);
    }
    (yt, weights)
}

/// Cross-fitted EM: for each fold, fit on the other folds and evaluate on this one.
/// Labels are resolved fold by fold with the configured condition.
pub fn run_em<R: Rng>(
    data: &ObservedDataset,
    config: &EstimatorConfig,
    folds: &FoldAssignment,
    init: &EmInit,
    rng: &mut R,
) -> Result<(NuisanceSet, EmDiagnostics)> {
    config.validate()?;
    let n = data.n();
    let mut diag = EmDiagnostics::default();
    let mut u: f64 = rng.gen_range(0.1..0.3);
    let mut units = vec![
        UnitNuisance {
            propensity: 0.5,
            surrogate: [0.5; 2],
            proxy: [0.5; 2],
            outcome: [0.0; 2],
        };
        n
    ];
    let k = data.kind().levels();
    let mut probs: Vec<Vec<[f64; 2]>> = vec![Vec::new(); n];
    let mut supports = Vec::new();
    let mut cweights: Vec<[Vec<f64>; 2]> = vec![[Vec::new(), Vec::new()]; n];

    for j in 0..folds.k {
        let eval = folds.eval(j);
        if eval.is_empty() {
            continue;
        }
        let ctx = FoldContext::new(data, folds.train(j), config.bandwidth_scale)?;
        diag.kernel_fallbacks += ctx.fallbacks;
        let mut fit = fit_fold(&ctx, init, u, config.em_threshold, config.em_max_iters);
        if collapsed(&fit, ctx.train()) {
            diag.restarts += 1;
            u = rng.gen_range(0.1..0.3);
            let retry = fit_fold(&ctx, init, u, config.em_threshold, config.em_max_iters);
            if collapsed(&retry, ctx.train()) {
                diag.warnings.push(format!("fold {j}: posterior collapsed onto one class after restart"));
            }
            fit = retry;
        }
        if !fit.converged {
            diag.warnings.push(format!(
                "fold {j}: EM stopped after {} iterations without converging",
                fit.iterations
            ));
        }
        diag.iterations.push(fit.iterations);
        diag.converged.push(fit.converged);
        diag.clamped += fit.clamped;

        let c = &fit.components;
        for &i in &eval {
            units[i] = UnitNuisance {
                propensity: c.prior[i],
                surrogate: c.surrogate[i],
                proxy: c.proxy[i],
                outcome: [0.0; 2],
            };
        }
        if let Some(k) = k {
            for &i in &eval {
                let t = outcome_table(&fit.maps, &ctx, i);
                debug_assert_eq!(t.len(), k);
                for s in 0..2 {
                    units[i].outcome[s] = t
                        .iter()
                        .enumerate()
                        .map(|(r, p)| data.kind().level_value(r) * p[s])
                        .sum();
                }
                probs[i] = t;
            }
        } else {
            let (support, w) = continuous_weights(&ctx, &fit, &eval);
            for (e, &i) in eval.iter().enumerate() {
                for s in 0..2 {
                    units[i].outcome[s] = w[e][s].iter().zip(&support).map(|(w, y)| w * y).sum();
                }
                cweights[i] = w[e].clone();
            }
            supports.push((j, support));
        }
    }

    let outcome_law = match k {
        Some(_) => OutcomeLaw::Discrete {
            kind: data.kind(),
            probs,
        },
        None => {
            let mut sup = vec![Vec::new(); folds.k];
            for (j, s) in supports {
                sup[j] = s;
            }
            OutcomeLaw::Continuous {
                supports: sup,
                fold_of: folds.fold_of.clone(),
                weights: cweights,
            }
        }
    };
    let mut set = NuisanceSet {
        units,
        outcome_law,
        label_resolved: false,
    };
    for j in 0..folds.k {
        let eval = folds.eval(j);
        if set.resolve_global(&eval, config.label_condition) {
            diag.relabeled_folds += 1;
        }
    }
    set.label_resolved = true;
    Ok((set, diag))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn posterior_hand_fixture() {
        // Likelihood ratios 2, 3 and 1/2 at prior 1/2.
        let p = posterior_raw(0.5, [1.0, 2.0], [1.0, 3.0], [1.0, 0.5]).unwrap();
        assert!((p - 0.75).abs() < 1e-15);
    }

    #[test]
    fn impossible_class_gives_certain_posterior() {
        let p = posterior_raw(0.3, [0.5, 0.5], [0.0, 0.4], [0.5, 0.5]).unwrap();
        assert_eq!(p, 1.0);
        assert!(posterior_raw(0.3, [0.0, 0.0], [0.5, 0.5], [0.5, 0.5]).is_none());
    }

    #[test]
    fn bayes_component_fixture() {
        assert!((bayes_component(0.6, 0.5, 0.25, 1) - 1.2).abs() < 1e-15);
        assert_eq!(clamp_map(1.2), 0.999);
    }

    #[test]
    fn folds_partition_units() {
        let mut rng = crate::rng::stream_rng(1, 0);
        let f = FoldAssignment::random(23, 5, &mut rng).unwrap();
        let mut seen = vec![0; 23];
        for j in 0..5 {
            let e = f.eval(j);
            assert!(e.len() == 4 || e.len() == 5);
            e.iter().for_each(|&i| seen[i] += 1);
            assert_eq!(f.train(j).len() + e.len(), 23);
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert!(FoldAssignment::random(3, 5, &mut rng).is_err());
    }
}
