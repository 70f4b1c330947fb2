use std::path::Path;

use anyhow::{Context, Result};
use proplab_core::events::ActionCount;
use proplab_core::evaluation::ReplyBuckets;
use proplab_core::hdp::{stick_breaking, HdpParams};
use proplab_core::inference::{FitConfig, Q0Treatment};
use proplab_core::model::FeedbackModel;
use proplab_core::simulation::SimConfig;
use proplab_core::{LearningParams, ModelParams, RewardFunction};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn read_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

/// A synthetic corpus. The model is `params` when given, otherwise a
/// stick-breaking popularity over `communities` with the scalars below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub users: usize,
    pub actions: ActionCount,
    pub params: Option<ModelParams>,
    pub communities: usize,
    pub gamma: f64,
    pub alpha0: f64,
    pub phi: f64,
    pub epsilon: f64,
    pub w_replies: f64,
    pub w_votes: f64,
    pub w_intercept: f64,
    pub feedback: FeedbackModel,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            users: 100,
            actions: ActionCount::Fixed(100),
            params: None,
            communities: 20,
            gamma: 5.0,
            alpha0: 2.0,
            phi: 0.1,
            epsilon: 0.2,
            w_replies: 1.0,
            w_votes: 0.5,
            w_intercept: 0.0,
            feedback: FeedbackModel::default(),
        }
    }
}

impl CorpusConfig {
    pub fn model(&self, seed: u64) -> Result<ModelParams> {
        if let Some(p) = &self.params {
            return Ok(p.clone());
        }
        Ok(ModelParams {
            hdp: HdpParams {
                alpha0: self.alpha0,
                popularity: stick_breaking(self.gamma, self.communities, seed)?,
            },
            learning: LearningParams::new(self.phi, self.epsilon)?,
            reward: RewardFunction::linear(self.w_replies, self.w_votes, self.w_intercept),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResponseFigure {
    pub corpus: CorpusConfig,
    pub buckets: ReplyBuckets,
}

impl Default for ResponseFigure {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig {
                users: 1000,
                w_replies: 2.0,
                w_votes: 0.2,
                ..CorpusConfig::default()
            },
            buckets: ReplyBuckets::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepFigure {
    pub corpus: CorpusConfig,
    pub fit: FitConfig,
    pub fractions: Vec<f64>,
    pub k: usize,
    pub test_fraction: f64,
    pub min_actions: usize,
}

impl Default for SweepFigure {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig {
                users: 300,
                ..CorpusConfig::default()
            },
            fit: FitConfig {
                n_samples: 3_000,
                burn_in: 1_000,
                q0_treatment: Q0Treatment::SampleLatent,
                reply_cap: Some(5.0),
                ..FitConfig::default()
            },
            fractions: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            k: 10,
            test_fraction: 0.2,
            min_actions: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationFigure {
    pub runs: usize,
    pub sim: SimConfig,
}

impl Default for SimulationFigure {
    fn default() -> Self {
        Self {
            runs: 200,
            sim: SimConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FiguresConfig {
    pub response: ResponseFigure,
    pub sweep: SweepFigure,
    pub simulation: SimulationFigure,
}

impl FiguresConfig {
    /// A small version of every figure, for smoke runs.
    pub fn quick(mut self) -> Self {
        self.response.corpus.users = self.response.corpus.users.min(100);
        self.response.corpus.actions = ActionCount::Fixed(40);
        self.sweep.corpus.users = self.sweep.corpus.users.min(40);
        self.sweep.corpus.actions = ActionCount::Fixed(30);
        self.sweep.fit.n_samples = self.sweep.fit.n_samples.min(300);
        self.sweep.fit.burn_in = self.sweep.fit.burn_in.min(100);
        self.simulation.runs = self.simulation.runs.min(6);
        self.simulation.sim.n_agents = self.simulation.sim.n_agents.min(20);
        self
    }
}
