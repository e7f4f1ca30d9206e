//! Credible regions with exact credibility and controllable continuity on
//! gridded compact parameter spaces, frequentist coverage evaluation, and
//! synthesis of matching priors by damped fixed-point iteration.
//!
//! The pipeline: a [`model::Model`] gives posteriors for any prior on a
//! [`measure::ParameterGrid`]; [`credible`] builds acceptance-probability
//! fields for balls, HPD regions, their relaxed (Lipschitz) variants and the
//! level-averaged perturbed regions; [`coverage`] evaluates frequentist
//! coverage exactly over the finite sample space; [`matching`] reweights
//! priors toward coverage-deficient parameters until the credible family is
//! also a confidence family.

pub mod config;
pub mod coverage;
pub mod credible;
pub mod error;
pub mod matching;
pub mod measure;
pub mod model;
pub mod posterior;

pub use error::{Error, Result};
