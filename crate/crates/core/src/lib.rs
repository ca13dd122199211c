//! Instrumental-variable estimation of marginal structural mean models
//! for time-varying binary and continuous treatments.

pub mod cli;
pub mod diagnostics;
pub mod estimators;
pub mod inference;
pub mod markov_analysis;
pub mod numerics;
pub mod nuisance;
pub mod panel;
pub mod simulate;
pub mod weights;
