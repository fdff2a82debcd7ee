//! Estimation of average and related causal effects of a binary treatment `A*` that is
//! never observed directly. Each unit carries a surrogate `A` and a proxy `Z` of the
//! treatment, an outcome `Y` and covariates `X`; `Y`, `A` and `Z` are independent given
//! `(A*, X)`.

pub mod config;
pub mod data;
pub mod efficiency;
pub mod em;
pub mod estimators;
pub mod functionals;
pub mod error;
pub mod ident;
pub mod kernel;
pub mod law;
pub mod nuisance;
pub mod rng;
pub mod sim;

pub use config::{EstimatorConfig, LabelCondition};
pub use data::{ObservedDataset, OutcomeKind};
pub use error::{Error, Result};
pub use nuisance::{NuisanceSet, OutcomeLaw, UnitNuisance};
