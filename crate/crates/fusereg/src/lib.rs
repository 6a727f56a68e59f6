//! Regression analysis for fused two-source data.
//!
//! Two samples are stacked into one dataset: source A observes the outcome
//! `Y` together with common covariates `V`, source B observes extra
//! covariates `L` together with `V`, and no unit is observed in both. This
//! crate estimates the coefficients of a parametric outcome regression
//! `E[Y | V, L]` from such data via three families of estimating equations:
//!
//! * **IPW** — inverse probability weighting by a model for the data-source
//!   membership probability `π(V)`,
//! * **IMP** — imputation-based, driven by a model `t(L | V)` for the
//!   covariates missing from source A,
//! * **DR** — doubly robust, consistent when either of the two nuisance
//!   models is correct.
//!
//! On top of the point estimators sit stacked-equation sandwich variances,
//! Wald intervals, a nonparametric bootstrap, Rubin pooling for multiply
//! imputed replicates, locally efficient weight selection, and a Monte Carlo
//! harness that reproduces the reference simulation study.
//!
//! The hot loops (simulation replicates, bootstrap resamples, moment sums)
//! are data parallel. With the default `parallel` feature they run on rayon;
//! without it the same code runs sequentially and produces bit-identical
//! results, because every reduction uses a fixed-shape pairwise tree.

pub mod data_model;
pub mod design;
pub mod efficiency;
pub mod error;
pub mod estimating;
pub mod exec;
pub mod inference;
pub mod nuisance;
pub mod quadrature;
pub mod rng;
pub mod simharness;
pub mod stats;

pub use error::{Error, Result};
