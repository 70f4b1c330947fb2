//! Parameter inference for the propensity-learning model.
//!
//! Sequence likelihoods are exact: given a user's initial propensities and
//! the observed rewards, the state evolves deterministically, so the
//! probability of each observed choice is a ratio of propensities. The
//! sampler is Metropolis-within-Gibbs over learning rates, reward weights and
//! the Dirichlet concentration, with per-user initial propensities either
//! point-estimated or sampled by data augmentation.

mod fit;
mod likelihood;
mod mode;
mod priors;
mod q0;

pub use crate::params::ModelParams;
pub use fit::{
    fit, Blocks, Diagnostics, FitConfig, FitResult, InitialParams, PosteriorSample,
    ProposalScales, Q0Treatment,
};
pub use likelihood::{
    log_posterior, observed_actions, sequence_log_likelihood, LikelihoodOptions, ObservedAction,
};
pub use priors::{Prior, Priors};
pub use q0::{estimate_q0_map, q0_objective};

