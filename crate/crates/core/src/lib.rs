//! Community selection under social feedback.
//!
//! Users hold propensities over communities, pick one in proportion to them,
//! and reinforce it by a linear reward of the feedback they get back, with
//! recency decay and exploration towards their initial interests. Initial
//! interests come from a truncated hierarchical Dirichlet process prior.
//!
//! - [`model`]: the propensity state and its update rule
//! - [`hdp`]: global popularity and initial-propensity priors
//! - [`inference`]: sequence likelihoods and the MCMC fitter
//! - [`evaluation`]: next-community prediction, baselines, scoring
//! - [`simulation`]: community seeding experiments
//! - [`events`]: event logs and synthetic corpora

pub mod error;
pub mod evaluation;
pub mod events;
pub mod exec;
pub mod hdp;
pub mod inference;
pub mod model;
pub mod params;
pub mod simulation;

pub use error::{Error, Result};
pub use events::{Action, EventLog, EventRecord, UserSequence};
pub use exec::Execution;
pub use model::{CommunityId, FeedbackVector, LearningParams, PropensityState, RewardFunction};
pub use params::ModelParams;
