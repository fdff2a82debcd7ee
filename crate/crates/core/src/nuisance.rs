//! Per-unit nuisance values indexed by the latent treatment.

use serde::{Deserialize, Serialize};

use crate::config::LabelCondition;
use crate::data::OutcomeKind;

/// Nuisances at one covariate value. Arrays are indexed by `A*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitNuisance {
    /// pr(A* = 1 | X).
    pub propensity: f64,
    /// E(A | A* = s, X).
    pub surrogate: [f64; 2],
    /// E(Z | A* = s, X).
    pub proxy: [f64; 2],
    /// E(Y | A* = s, X).
    pub outcome: [f64; 2],
}

impl UnitNuisance {
    /// f(s | X).
    pub fn prior(&self, s: usize) -> f64 {
        if s == 1 {
            self.propensity
        } else {
            1.0 - self.propensity
        }
    }

    pub fn swapped(&self) -> Self {
        Self {
            propensity: 1.0 - self.propensity,
            surrogate: [self.surrogate[1], self.surrogate[0]],
            proxy: [self.proxy[1], self.proxy[0]],
            outcome: [self.outcome[1], self.outcome[0]],
        }
    }

    /// Whether `condition` would relabel this unit's classes.
    pub fn needs_swap(&self, condition: LabelCondition) -> bool {
        condition.pick(self.surrogate, [1.0 - self.propensity, self.propensity]) == 0
    }
}

/// Conditional outcome law given `(A*, X)` for each unit, when available.
#[derive(Debug, Clone, PartialEq)]
pub enum OutcomeLaw {
    /// Only the means are known.
    MeansOnly,
    /// `probs[i][r][s]` = pr(Y = level r | A* = s, X_i).
    Discrete { kind: OutcomeKind, probs: Vec<Vec<[f64; 2]>> },
    /// Weighted point masses on the training outcomes of the unit's fold:
    /// `weights[i][s][l]` sits on `supports[fold_of[i]][l]`.
    Continuous {
        supports: Vec<Vec<f64>>,
        fold_of: Vec<usize>,
        weights: Vec<[Vec<f64>; 2]>,
    },
}

impl OutcomeLaw {
    /// E{g(Y) | A* = s, X_i}.
    pub fn expect(&self, i: usize, s: usize, g: impl Fn(f64) -> f64) -> Option<f64> {
        match self {
            OutcomeLaw::MeansOnly => None,
            OutcomeLaw::Discrete { kind, probs } => Some(
                probs[i]
                    .iter()
                    .enumerate()
                    .map(|(r, p)| g(kind.level_value(r)) * p[s])
                    .sum(),
            ),
            OutcomeLaw::Continuous { supports, fold_of, weights } => Some(
                supports[fold_of[i]]
                    .iter()
                    .zip(&weights[i][s])
                    .map(|(y, w)| g(*y) * w)
                    .sum(),
            ),
        }
    }

    /// pr(Y <= theta | A* = s, X_i).
    pub fn cdf(&self, i: usize, s: usize, theta: f64) -> Option<f64> {
        self.expect(i, s, |y| if y <= theta { 1.0 } else { 0.0 })
    }

    fn swap_unit(&mut self, i: usize) {
        match self {
            OutcomeLaw::MeansOnly => {}
            OutcomeLaw::Discrete { probs, .. } => probs[i].iter_mut().for_each(|p| p.swap(0, 1)),
            OutcomeLaw::Continuous { weights, .. } => weights[i].swap(0, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceSet {
    pub units: Vec<UnitNuisance>,
    pub outcome_law: OutcomeLaw,
    pub label_resolved: bool,
}

impl NuisanceSet {
    pub fn new(units: Vec<UnitNuisance>) -> Self {
        Self {
            units,
            outcome_law: OutcomeLaw::MeansOnly,
            label_resolved: false,
        }
    }

    pub fn n(&self) -> usize {
        self.units.len()
    }

    /// Every unit's labels exchanged.
    pub fn swapped(&self) -> Self {
        let mut out = self.clone();
        for i in 0..out.n() {
            out.swap_unit(i);
        }
        out
    }

    pub fn swap_unit(&mut self, i: usize) {
        self.units[i] = self.units[i].swapped();
        self.outcome_law.swap_unit(i);
    }

    /// Relabels unit by unit so that `condition` holds at every covariate value.
    /// Returns the oriented set and the number of units that were flipped.
    pub fn oriented(&self, condition: LabelCondition) -> (Self, usize) {
        let mut out = self.clone();
        let mut flips = 0;
        for i in 0..out.n() {
            if out.units[i].needs_swap(condition) {
                out.swap_unit(i);
                flips += 1;
            }
        }
        out.label_resolved = true;
        (out, flips)
    }

    /// Chooses one labelling for the listed units by aggregating over them: under
    /// C1/C2 the class with the larger total E(A | class, X_i) is `A* = 1`; under C3/C4
    /// the rule is applied to pr(A = 1, class) and pr(class).
    pub fn resolve_global(&mut self, units: &[usize], condition: LabelCondition) -> bool {
        if units.is_empty() {
            return false;
        }
        let m = units.len() as f64;
        let mut e = [0.0; 2];
        let mut l = [0.0; 2];
        let mut el = [0.0; 2];
        for &i in units {
            let u = &self.units[i];
            for s in 0..2 {
                e[s] += u.surrogate[s] / m;
                l[s] += u.prior(s) / m;
                el[s] += u.surrogate[s] * u.prior(s) / m;
            }
        }
        let pick = match condition {
            LabelCondition::C1 | LabelCondition::C2 => condition.pick(e, l),
            _ => condition.pick([el[0] / l[0], el[1] / l[1]], l),
        };
        let swap = pick == 0;
        if swap {
            for &i in units {
                self.swap_unit(i);
            }
        }
        self.label_resolved = true;
        swap
    }

    /// Copy with every Bernoulli mean and the propensity clamped to `[eps, 1 - eps]`;
    /// also returns how many values moved.
    pub fn trimmed(&self, eps: f64) -> (Self, usize) {
        let mut out = self.clone();
        let mut count = 0;
        let mut clamp = |v: &mut f64| {
            let c = v.clamp(eps, 1.0 - eps);
            if c != *v {
                count += 1;
                *v = c;
            }
        };
        for u in out.units.iter_mut() {
            clamp(&mut u.propensity);
            for s in 0..2 {
                clamp(&mut u.surrogate[s]);
                clamp(&mut u.proxy[s]);
            }
        }
        (out, count)
    }
}
