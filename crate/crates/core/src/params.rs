use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::hdp::HdpParams;
use crate::model::{LearningParams, RewardFunction};

/// Everything that governs generation, inference, prediction and simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub hdp: HdpParams,
    pub learning: LearningParams,
    pub reward: RewardFunction,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        self.hdp.validate()?;
        self.learning.validate()?;
        self.reward.validate()
    }

    /// Dirichlet concentration vector `alpha0 * [beta || beta_unseen]`.
    pub fn dirichlet_alpha(&self) -> Vec<f64> {
        self.hdp.dirichlet_alpha()
    }
}
