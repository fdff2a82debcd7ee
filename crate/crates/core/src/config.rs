use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rule that fixes which latent class is called `A* = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LabelCondition {
    /// pr(A = 1 | A* = 1) > pr(A = 1 | A* = 0).
    #[default]
    C1,
    /// Sensitivity plus specificity above one; same ordering rule as `C1`.
    C2,
    /// pr(A* = 1 | A = 1) > pr(A* = 0 | A = 1).
    C3,
    /// pr(A* = 0 | A = 0) > pr(A* = 1 | A = 0).
    C4,
}

impl LabelCondition {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "c1" => Ok(Self::C1),
            "c2" => Ok(Self::C2),
            "c3" => Ok(Self::C3),
            "c4" => Ok(Self::C4),
            other => Err(Error::Validation(format!("unknown label condition '{other}'"))),
        }
    }

    /// Index (0 or 1) of the candidate class that should be labelled `A* = 1`, given
    /// each candidate's pr(A = 1 | class) in `e` and its mass in `l`.
    pub fn pick(&self, e: [f64; 2], l: [f64; 2]) -> usize {
        match self {
            Self::C1 | Self::C2 => usize::from(e[1] > e[0]),
            Self::C3 => usize::from(e[1] * l[1] > e[0] * l[0]),
            Self::C4 => usize::from((1.0 - e[1]) * l[1] < (1.0 - e[0]) * l[0]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Cross-fitting folds; 1 disables sample splitting.
    pub folds: usize,
    /// EM stops once the posterior moves less than this on every training unit.
    pub em_threshold: f64,
    pub em_max_iters: usize,
    /// Multiplier applied to every rule-of-thumb bandwidth.
    pub bandwidth_scale: f64,
    /// Floor for propensities, Bernoulli means and mean separations.
    pub trim_epsilon: f64,
    pub seed: u64,
    pub label_condition: LabelCondition,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            em_threshold: 0.001,
            em_max_iters: 200,
            bandwidth_scale: 1.0,
            trim_epsilon: 0.01,
            seed: 0,
            label_condition: LabelCondition::C1,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds == 0 {
            return Err(Error::Validation("folds must be at least 1".into()));
        }
        if !(self.em_threshold > 0.0) {
            return Err(Error::Validation("EM threshold must be positive".into()));
        }
        if self.em_max_iters == 0 {
            return Err(Error::Validation("EM needs at least one iteration".into()));
        }
        if !(self.bandwidth_scale > 0.0 && self.bandwidth_scale.is_finite()) {
            return Err(Error::Validation("bandwidth scale must be positive".into()));
        }
        if !(self.trim_epsilon > 0.0 && self.trim_epsilon < 0.5) {
            return Err(Error::Validation("trim epsilon must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}
