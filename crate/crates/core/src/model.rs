//! Erev-Roth style propensity learning with recency and exploration.
//!
//! A [`PropensityState`] holds one slot per indexed community followed by a
//! single "unseen" slot that stands for every community the user has not been
//! indexed against yet. After each action the state is updated in three fixed
//! steps: global decay by `1 - phi`, a direct reward of `(1 - epsilon) * R` on
//! the chosen slot, and exploration mass `epsilon * R * q0` spread over all
//! slots.

use std::collections::HashMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ModelParams;

pub type CommunityId = String;

/// Tolerance used when checking that a vector lies on the probability simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Social feedback attached to one action.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackVector {
    pub replies_norm: f64,
    pub vote_score: f64,
}

impl FeedbackVector {
    pub fn new(replies_norm: f64, vote_score: f64) -> Result<Self> {
        let fv = Self {
            replies_norm,
            vote_score,
        };
        fv.validate()?;
        Ok(fv)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.replies_norm.is_finite() || !self.vote_score.is_finite() {
            return Err(Error::InvalidInput(format!(
                "feedback must be finite, got {self:?}"
            )));
        }
        if self.replies_norm < 0.0 {
            return Err(Error::InvalidInput(format!(
                "normalized reply count must be nonnegative, got {}",
                self.replies_norm
            )));
        }
        Ok(())
    }
}

/// Feedback as it appears in an event log: integer reply count and net score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawFeedback {
    pub replies: u32,
    pub score: i64,
}

/// Maps raw reply counts onto `[0, 1]`-ish features by dividing by a cap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplyNormalizer {
    pub reply_cap: f64,
}

impl ReplyNormalizer {
    pub fn new(reply_cap: f64) -> Result<Self> {
        if !(reply_cap.is_finite() && reply_cap > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "reply cap must be positive, got {reply_cap}"
            )));
        }
        Ok(Self { reply_cap })
    }

    /// Nearest-rank 99th percentile of the given reply counts, at least 1.
    pub fn from_reply_counts<I: IntoIterator<Item = u32>>(counts: I) -> Self {
        let mut counts: Vec<u32> = counts.into_iter().collect();
        if counts.is_empty() {
            return Self { reply_cap: 1.0 };
        }
        counts.sort_unstable();
        let rank = ((0.99 * counts.len() as f64).ceil() as usize).clamp(1, counts.len());
        Self {
            reply_cap: f64::from(counts[rank - 1].max(1)),
        }
    }

    pub fn normalize(&self, raw: RawFeedback) -> FeedbackVector {
        FeedbackVector {
            replies_norm: f64::from(raw.replies) / self.reply_cap,
            vote_score: raw.score as f64,
        }
    }
}

/// Linear reward over feedback features, clamped below at `floor`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardFunction {
    pub w_replies: f64,
    pub w_votes: f64,
    pub w_intercept: f64,
    pub floor: f64,
}

impl RewardFunction {
    pub fn linear(w_replies: f64, w_votes: f64, w_intercept: f64) -> Self {
        Self {
            w_replies,
            w_votes,
            w_intercept,
            floor: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.w_replies.is_finite()
            && self.w_votes.is_finite()
            && self.w_intercept.is_finite()
            && self.floor.is_finite();
        if !finite || self.floor < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "reward weights must be finite with a nonnegative floor, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn reward(&self, r: &FeedbackVector) -> Result<f64> {
        self.validate()?;
        r.validate()?;
        Ok(self.eval(r))
    }

    /// Unchecked evaluation for hot loops where inputs were validated upstream.
    #[inline]
    pub fn eval(&self, r: &FeedbackVector) -> f64 {
        let linear =
            self.w_intercept + self.w_replies * r.replies_norm + self.w_votes * r.vote_score;
        linear.max(self.floor)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningParams {
    pub phi: f64,
    pub epsilon: f64,
}

impl LearningParams {
    pub fn new(phi: f64, epsilon: f64) -> Result<Self> {
        let lp = Self { phi, epsilon };
        lp.validate()?;
        Ok(lp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.phi) || !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidArgument(format!(
                "phi and epsilon must lie in [0, 1], got {self:?}"
            )));
        }
        Ok(())
    }
}

/// A user's initial and current propensities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StateRepr", into = "StateRepr")]
pub struct PropensityState {
    communities: Vec<CommunityId>,
    index: HashMap<CommunityId, usize>,
    q0: Vec<f64>,
    q: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StateRepr {
    communities: Vec<CommunityId>,
    q0: Vec<f64>,
    q: Vec<f64>,
}

impl TryFrom<StateRepr> for PropensityState {
    type Error = Error;

    fn try_from(r: StateRepr) -> Result<Self> {
        Self::from_parts(r.communities, r.q0, r.q)
    }
}

impl From<PropensityState> for StateRepr {
    fn from(s: PropensityState) -> Self {
        StateRepr {
            communities: s.communities,
            q0: s.q0,
            q: s.q,
        }
    }
}

pub(crate) fn check_simplex(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidInput(format!(
            "{what} must have finite nonnegative entries"
        )));
    }
    let total: f64 = v.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidInput(format!(
            "{what} must sum to 1, sums to {total}"
        )));
    }
    Ok(())
}

impl PropensityState {
    /// Fresh state with `q = q0`. `q0` has one entry per community plus the
    /// trailing unseen slot.
    pub fn new(communities: Vec<CommunityId>, q0: Vec<f64>) -> Result<Self> {
        let q = q0.clone();
        Self::from_parts(communities, q0, q)
    }

    pub fn from_parts(communities: Vec<CommunityId>, q0: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        if q0.len() != communities.len() + 1 || q.len() != q0.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} slots for {} communities, got q0={} q={}",
                communities.len() + 1,
                communities.len(),
                q0.len(),
                q.len()
            )));
        }
        check_simplex(&q0, "q0")?;
        if q.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidInput(
                "q must have finite nonnegative entries".into(),
            ));
        }
        let mut index = HashMap::with_capacity(communities.len());
        for (i, c) in communities.iter().enumerate() {
            if index.insert(c.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate community {c:?}")));
            }
        }
        Ok(Self {
            communities,
            index,
            q0,
            q,
        })
    }

    pub fn communities(&self) -> &[CommunityId] {
        &self.communities
    }

    pub fn q0(&self) -> &[f64] {
        &self.q0
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn n_slots(&self) -> usize {
        self.q.len()
    }

    pub fn unseen_slot(&self) -> usize {
        self.communities.len()
    }

    pub fn slot_of(&self, community: &str) -> Option<usize> {
        self.index.get(community).copied()
    }

    /// Normalized propensities, in slot order.
    pub fn choice_distribution(&self) -> Result<Vec<f64>> {
        let total: f64 = self.q.iter().sum();
        if !(total > 0.0) {
            return Err(Error::DegenerateState);
        }
        Ok(self.q.iter().map(|x| x / total).collect())
    }

    pub fn apply_update(&self, chosen: usize, reward: f64, lp: &LearningParams) -> Result<Self> {
        let mut next = self.clone();
        next.update_in_place(chosen, reward, lp)?;
        Ok(next)
    }

    pub fn update_in_place(&mut self, chosen: usize, reward: f64, lp: &LearningParams) -> Result<()> {
        if chosen >= self.q.len() {
            return Err(Error::IndexOutOfRange {
                index: chosen,
                len: self.q.len(),
            });
        }
        if !(reward >= 0.0 && reward.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "reward must be finite and nonnegative, got {reward}"
            )));
        }
        // decay, then direct reward, then exploration
        let keep = 1.0 - lp.phi;
        for x in self.q.iter_mut() {
            *x *= keep;
        }
        self.q[chosen] += (1.0 - lp.epsilon) * reward;
        let spread = lp.epsilon * reward;
        if spread != 0.0 {
            for (x, base) in self.q.iter_mut().zip(&self.q0) {
                *x += spread * base;
            }
        }
        Ok(())
    }

    pub fn grow_state(&self, community: &str, split_fraction: f64) -> Result<Self> {
        let mut next = self.clone();
        next.grow_in_place(community, split_fraction)?;
        Ok(next)
    }

    /// Carves a new slot for `community` out of the unseen remainder of both
    /// `q0` and `q`. Returns the new slot index.
    pub fn grow_in_place(&mut self, community: &str, split_fraction: f64) -> Result<usize> {
        if self.index.contains_key(community) {
            return Err(Error::InvalidArgument(format!(
                "community {community:?} is already indexed"
            )));
        }
        if !(0.0..=1.0).contains(&split_fraction) {
            return Err(Error::InvalidArgument(format!(
                "split fraction must lie in [0, 1], got {split_fraction}"
            )));
        }
        let unseen = self.unseen_slot();
        let q0_moved = self.q0[unseen] * split_fraction;
        let q_moved = self.q[unseen] * split_fraction;
        self.q0[unseen] -= q0_moved;
        self.q[unseen] -= q_moved;
        // keep the unseen slot last
        self.q0.insert(unseen, q0_moved);
        self.q.insert(unseen, q_moved);
        self.communities.push(community.to_string());
        self.index.insert(community.to_string(), unseen);
        Ok(unseen)
    }
}

/// Share of the unseen remainder handed to a newly indexed community.
///
/// With a known global popularity `beta_new` out of an unseen mass
/// `beta_unseen` the share is their ratio; otherwise one half.
pub fn split_fraction(beta_new: Option<f64>, beta_unseen: f64) -> f64 {
    match beta_new {
        Some(b) if beta_unseen > 0.0 => (b / beta_unseen).clamp(0.0, 1.0),
        _ => 0.5,
    }
}

/// Draws a slot from unnormalized nonnegative weights. Consumes one uniform.
pub fn draw_slot<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateState);
    }
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            acc += w;
            last_positive = i;
            if u < acc {
                return Ok(i);
            }
        }
    }
    Ok(last_positive)
}

/// Feedback features that follow a single observed action.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub raw: RawFeedback,
    pub features: FeedbackVector,
}

pub trait FeedbackSource {
    fn draw(&mut self, community: &str, rng: &mut dyn RngCore) -> Observation;
}

/// Replies ~ min(Poisson(rate * crowd), cap) and score ~ round(Normal(mean * crowd, sd)).
///
/// `crowd` is 1 for standalone generation; the seeding simulator scales it by
/// the number of co-located posts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackModel {
    pub reply_rate: f64,
    pub reply_cap: u32,
    pub vote_mean: f64,
    pub vote_sd: f64,
}

impl Default for FeedbackModel {
    fn default() -> Self {
        Self {
            reply_rate: 2.0,
            reply_cap: 5,
            vote_mean: 1.0,
            vote_sd: 2.0,
        }
    }
}

impl FeedbackModel {
    pub fn silent() -> Self {
        Self {
            reply_rate: 0.0,
            reply_cap: 1,
            vote_mean: 0.0,
            vote_sd: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.reply_rate.is_finite()
            && self.reply_rate >= 0.0
            && self.reply_cap >= 1
            && self.vote_mean.is_finite()
            && self.vote_sd.is_finite()
            && self.vote_sd >= 0.0;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "invalid feedback model {self:?}"
            )));
        }
        Ok(())
    }

    pub fn normalizer(&self) -> ReplyNormalizer {
        ReplyNormalizer {
            reply_cap: f64::from(self.reply_cap),
        }
    }

    pub fn draw_raw<R: Rng + ?Sized>(&self, crowd: f64, rng: &mut R) -> RawFeedback {
        let rate = self.reply_rate * crowd;
        let replies = if rate > 0.0 {
            let k: f64 = Poisson::new(rate).expect("positive rate").sample(rng);
            (k as u64).min(u64::from(self.reply_cap)) as u32
        } else {
            0
        };
        let mean = self.vote_mean * crowd;
        let score = if self.vote_sd > 0.0 {
            Normal::new(mean, self.vote_sd)
                .expect("finite normal")
                .sample(rng)
                .round() as i64
        } else {
            mean.round() as i64
        };
        RawFeedback { replies, score }
    }
}

impl FeedbackSource for FeedbackModel {
    fn draw(&mut self, _community: &str, rng: &mut dyn RngCore) -> Observation {
        let raw = self.draw_raw(1.0, rng);
        Observation {
            raw,
            features: self.normalizer().normalize(raw),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionDraw {
    pub community: CommunityId,
    pub feedback: RawFeedback,
    pub features: FeedbackVector,
    pub reward: f64,
}

/// Runs the generative loop for one user: draw a slot, observe feedback,
/// update. Picking the unseen slot creates a fresh community named
/// `novel-<i>` where `i` is the action index.
pub fn sample_trajectory<F: FeedbackSource + ?Sized>(
    params: &ModelParams,
    q0: &[f64],
    n: usize,
    feedback: &mut F,
    rng_seed: u64,
) -> Result<Vec<ActionDraw>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_trajectory_with(params, q0, n, feedback, &mut rng, |i| format!("novel-{i}"))
}

pub(crate) fn sample_trajectory_with<F, R, N>(
    params: &ModelParams,
    q0: &[f64],
    n: usize,
    feedback: &mut F,
    rng: &mut R,
    mut novel_name: N,
) -> Result<Vec<ActionDraw>>
where
    F: FeedbackSource + ?Sized,
    R: RngCore,
    N: FnMut(usize) -> CommunityId,
{
    params.validate()?;
    let mut state = PropensityState::new(params.hdp.popularity.communities.clone(), q0.to_vec())?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut slot = draw_slot(state.q(), rng)?;
        if slot == state.unseen_slot() {
            let name = novel_name(i);
            slot = state.grow_in_place(&name, 0.5)?;
        }
        let community = state.communities()[slot].clone();
        let obs = feedback.draw(&community, rng);
        let reward = params.reward.eval(&obs.features);
        state.update_in_place(slot, reward, &params.learning)?;
        out.push(ActionDraw {
            community,
            feedback: obs.raw,
            features: obs.features,
            reward,
        });
    }
    Ok(out)
}
