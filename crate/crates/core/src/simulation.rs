//! Community seeding experiments.
//!
//! A population of model agents chooses communities round by round, and each
//! post collects feedback proportional to how many other posts landed in the
//! same community that round. For the first `seed_rounds` rounds a few seed
//! users post only in the target community, which inflates the feedback
//! there. The recorded interest is the share of normal agents posting in the
//! target each round; seed posts never count towards it.
//!
//! Randomness: agent `i` of a run draws everything (its initial propensities,
//! then per round one uniform for the choice followed by its feedback) from
//! `ChaCha8Rng::seed_from_u64(rng_seed)` on stream `i + 1`.

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::hdp::{GlobalPopularity, HdpParams, sample_dirichlet};
use crate::model::{
    draw_slot, CommunityId, FeedbackModel, LearningParams, PropensityState, RawFeedback,
    ReplyNormalizer, RewardFunction,
};
use crate::params::ModelParams;

/// Feedback each post receives from its co-located posts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrowdFeedback {
    /// Replies per co-located post; replies are Poisson and capped.
    pub reply_rate: f64,
    /// Reply cap, also used to normalize replies for the reward.
    pub reply_cap: u32,
    /// Vote score mean per co-located post.
    pub vote_mean: f64,
    pub vote_sd: f64,
    /// Restrict feedback to one community; posts elsewhere get none.
    pub only_in: Option<CommunityId>,
    /// How many co-located posts each seed post counts as. Seed users
    /// actively reply and vote, so one seed outweighs one casual post.
    pub seed_weight: f64,
}

impl Default for CrowdFeedback {
    fn default() -> Self {
        Self {
            reply_rate: 0.1,
            reply_cap: 5,
            vote_mean: 0.0,
            vote_sd: 0.0,
            only_in: None,
            seed_weight: 5.0,
        }
    }
}

impl CrowdFeedback {
    fn model(&self) -> FeedbackModel {
        FeedbackModel {
            reply_rate: self.reply_rate,
            reply_cap: self.reply_cap,
            vote_mean: self.vote_mean,
            vote_sd: self.vote_sd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.seed_weight >= 0.0 && self.seed_weight.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "seed_weight must be finite and nonnegative, got {}",
                self.seed_weight
            )));
        }
        self.model().validate()
    }
}

/// Round thresholds for grouping trajectories. Rounds are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegimeThresholds {
    pub early_round: usize,
    pub early_max: f64,
    pub late_round: usize,
    pub late_max: f64,
}

impl Default for RegimeThresholds {
    fn default() -> Self {
        Self {
            early_round: 200,
            early_max: 0.4,
            late_round: 700,
            late_max: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    NoTraction,
    LateFailure,
    Success,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::NoTraction, Regime::LateFailure, Regime::Success];

    pub fn name(&self) -> &'static str {
        match self {
            Regime::NoTraction => "NoTraction",
            Regime::LateFailure => "LateFailure",
            Regime::Success => "Success",
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown regime {s:?}")))
    }
}

/// NoTraction if interest at the early round is at most `early_max`, else
/// LateFailure if interest at the late round is at most `late_max`, else
/// Success.
pub fn classify_trajectory(interest: &[f64], th: &RegimeThresholds) -> Result<Regime> {
    let need = th.early_round.max(th.late_round);
    if th.early_round == 0 || th.late_round == 0 {
        return Err(Error::InvalidArgument("threshold rounds are 1-based".into()));
    }
    if interest.len() < need {
        return Err(Error::InvalidInput(format!(
            "trajectory has {} rounds, classification needs {need}",
            interest.len()
        )));
    }
    Ok(if interest[th.early_round - 1] <= th.early_max {
        Regime::NoTraction
    } else if interest[th.late_round - 1] <= th.late_max {
        Regime::LateFailure
    } else {
        Regime::Success
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_agents: usize,
    pub n_seed_users: usize,
    pub seed_rounds: usize,
    pub total_rounds: usize,
    pub target_community: CommunityId,
    pub agent_params: ModelParams,
    pub feedback: CrowdFeedback,
    pub thresholds: RegimeThresholds,
    pub rng_seed: u64,
    #[serde(skip)]
    pub execution: Execution,
}

pub fn default_agent_params() -> ModelParams {
    let communities: Vec<CommunityId> = ["c00", "c01", "c02", "c03", "target"]
        .iter()
        .map(|c| c.to_string())
        .collect();
    ModelParams {
        hdp: HdpParams {
            alpha0: 5.0,
            popularity: GlobalPopularity::new(communities, vec![0.3, 0.25, 0.2, 0.15, 0.1], 0.0, 1.0)
                .expect("valid default popularity"),
        },
        learning: LearningParams {
            phi: 0.1,
            epsilon: 0.1,
        },
        reward: RewardFunction::linear(1.0, 0.0, 0.0),
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_agents: 50,
            n_seed_users: 5,
            seed_rounds: 200,
            total_rounds: 700,
            target_community: "target".into(),
            agent_params: default_agent_params(),
            feedback: CrowdFeedback::default(),
            thresholds: RegimeThresholds::default(),
            rng_seed: 0,
            execution: Execution::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.agent_params.validate()?;
        self.feedback.validate()?;
        if self.seed_rounds > self.total_rounds {
            return Err(Error::InvalidInput(format!(
                "seed_rounds {} exceeds total_rounds {}",
                self.seed_rounds, self.total_rounds
            )));
        }
        if self.target_slot().is_none() {
            return Err(Error::InvalidInput(format!(
                "target community {:?} is not among the agents' communities",
                self.target_community
            )));
        }
        if let Some(c) = &self.feedback.only_in {
            if !self.agent_params.hdp.popularity.communities.contains(c) {
                return Err(Error::InvalidInput(format!("unknown feedback community {c:?}")));
            }
        }
        Ok(())
    }

    fn target_slot(&self) -> Option<usize> {
        self.agent_params
            .hdp
            .popularity
            .communities
            .iter()
            .position(|c| *c == self.target_community)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    /// Interest in the target, one entry per round.
    pub interest: Vec<f64>,
    /// `None` for an empty population or a run too short to classify.
    pub regime: Option<Regime>,
    /// Set when the run had no normal agents and interest is undefined.
    pub empty_population: bool,
}

struct Agent {
    state: PropensityState,
    rng: ChaCha8Rng,
    choice: usize,
}

impl Agent {
    fn choose(&mut self) -> Result<usize> {
        let r = draw_slot(self.state.q(), &mut self.rng);
        let slot = match r {
            Ok(s) => s,
            // every propensity decayed away; fall back to initial interests
            Err(Error::DegenerateState) => draw_slot(self.state.q0(), &mut self.rng)?,
            Err(e) => return Err(e),
        };
        self.choice = slot;
        Ok(slot)
    }
}

/// Runs one seeding experiment.
pub fn run_seeding(cfg: &SimConfig) -> Result<TrajectorySummary> {
    cfg.validate()?;
    if cfg.n_agents == 0 {
        return Ok(TrajectorySummary {
            interest: Vec::new(),
            regime: None,
            empty_population: true,
        });
    }
    let target = cfg.target_slot().expect("validated");
    let params = &cfg.agent_params;
    let alpha = params.dirichlet_alpha();
    let communities = params.hdp.popularity.communities.clone();
    let normalizer = ReplyNormalizer::new(f64::from(cfg.feedback.reply_cap.max(1)))?;
    let feedback_model = cfg.feedback.model();
    let only_in = cfg
        .feedback
        .only_in
        .as_ref()
        .and_then(|c| communities.iter().position(|x| x == c));
    let exec = cfg.execution;

    let mut agents: Vec<Agent> = exec
        .map_range(cfg.n_agents, |i| -> Result<Agent> {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
            rng.set_stream(i as u64 + 1);
            let q0 = sample_dirichlet(&alpha, &mut rng)?;
            Ok(Agent {
                state: PropensityState::new(communities.clone(), q0)?,
                rng,
                choice: 0,
            })
        })
        .into_iter()
        .collect::<Result<_>>()?;

    let n_slots = communities.len() + 1;
    let mut interest = Vec::with_capacity(cfg.total_rounds);
    for round in 1..=cfg.total_rounds {
        let choices = exec.map_mut(&mut agents, |a| a.choose());
        let mut tally = vec![0.0f64; n_slots];
        for c in choices {
            tally[c?] += 1.0;
        }
        interest.push(tally[target] / cfg.n_agents as f64);
        if round <= cfg.seed_rounds {
            tally[target] += cfg.n_seed_users as f64 * cfg.feedback.seed_weight;
        }
        let learning = &params.learning;
        let reward_fn = &params.reward;
        let tally = &tally;
        let updates = exec.map_mut(&mut agents, |a| -> Result<()> {
            let c = a.choice;
            let raw = if only_in.is_some_and(|t| t != c) {
                RawFeedback { replies: 0, score: 0 }
            } else {
                feedback_model.draw_raw(tally[c] - 1.0, &mut a.rng)
            };
            let reward = reward_fn.eval(&normalizer.normalize(raw));
            a.state.update_in_place(c, reward, learning)
        });
        for u in updates {
            u?;
        }
    }
    let regime = classify_trajectory(&interest, &cfg.thresholds).ok();
    Ok(TrajectorySummary {
        interest,
        regime,
        empty_population: false,
    })
}

/// `n_runs` independent repetitions; run `r` uses seed `rng_seed + r`.
/// Runs are spread over `exec`; each run itself is sequential.
pub fn run_many(cfg: &SimConfig, n_runs: usize, exec: Execution) -> Result<Vec<TrajectorySummary>> {
    cfg.validate()?;
    exec.map_range(n_runs, |r| {
        let mut c = cfg.clone();
        c.rng_seed = cfg.rng_seed.wrapping_add(r as u64);
        c.execution = Execution::Sequential;
        run_seeding(&c)
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeCurve {
    pub regime: Regime,
    pub count: usize,
    pub mean_interest: Vec<f64>,
}

/// Pointwise mean interest within each regime, in `Regime::ALL` order.
/// Runs without a regime are ignored; regimes with no runs are omitted.
pub fn aggregate_runs(runs: &[TrajectorySummary]) -> Result<Vec<RegimeCurve>> {
    let classified: Vec<(&TrajectorySummary, Regime)> =
        runs.iter().filter_map(|r| r.regime.map(|g| (r, g))).collect();
    let Some((first, _)) = classified.first() else {
        return Ok(Vec::new());
    };
    let len = first.interest.len();
    if classified.iter().any(|(r, _)| r.interest.len() != len) {
        return Err(Error::InvalidInput("runs differ in round count".into()));
    }
    let mut out = Vec::new();
    for regime in Regime::ALL {
        let group: Vec<&TrajectorySummary> =
            classified.iter().filter(|(_, g)| *g == regime).map(|(r, _)| *r).collect();
        if group.is_empty() {
            continue;
        }
        let mut mean = vec![0.0; len];
        for r in &group {
            for (m, x) in mean.iter_mut().zip(&r.interest) {
                *m += x;
            }
        }
        let n = group.len() as f64;
        for m in &mut mean {
            *m /= n;
        }
        out.push(RegimeCurve {
            regime,
            count: group.len(),
            mean_interest: mean,
        });
    }
    Ok(out)
}
