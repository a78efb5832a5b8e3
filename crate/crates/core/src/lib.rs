//! Graded response model (GRM) calibration, scoring and predictive evaluation.
//!
//! Calibration is available by marginal maximum likelihood ([`mml`]) or by
//! Hamiltonian Monte Carlo on a weakly-informative hierarchical model
//! ([`bayes`]). Scoring ([`scoring`]) turns a response row into a Gaussian
//! ability summary, and [`evaluation`] compares calibration/scoring pairs by
//! cross-validated deviance.

pub mod bayes;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod math;
pub mod model;
pub mod mml;
pub mod quadrature;
pub mod scoring;
pub mod study;
mod optimize;

pub use error::{GrmError, Result};
pub use model::{
    category_probability, expected_category_probability, fisher_information,
    logistic_normal_integral, response_log_likelihood, simulate_responses, AbilityEstimate, Item,
    ItemParameters, ResponseMatrix,
};
