//! Value-decomposition learners for cooperative matrix games, latent-variable
//! committed exploration on top of them, and executable monotone-projection
//! analysis of the payoff tables they fail on.

// Negated comparisons are how NaN inputs get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agents;
pub mod analysis;
pub mod autodiff;
pub mod game;
pub mod harness;
pub mod maven;
pub mod nn;
