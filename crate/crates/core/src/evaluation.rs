//! Next-community prediction and its scoring.
//!
//! Every predictor produces a [`PredictiveDistribution`] over known
//! communities plus an unseen slot, and is scored with the quadratic rule
//! `2 p(outcome) - sum_c p(c)^2`. A training-fraction sweep holds out a fixed
//! per-user test suffix and varies how much of the preceding history each
//! predictor is trained on.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::events::{Action, EventLog, UserSequence};
use crate::exec::Execution;
use crate::hdp::HdpParams;
use crate::inference::{estimate_q0_map, FitResult, ObservedAction};
use crate::model::{split_fraction, CommunityId, PropensityState, ReplyNormalizer};
use crate::params::ModelParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    probs: BTreeMap<CommunityId, f64>,
    unseen: f64,
}

impl PredictiveDistribution {
    pub fn new(probs: BTreeMap<CommunityId, f64>, unseen: f64) -> Result<Self> {
        let d = Self { probs, unseen };
        d.validate()?;
        Ok(d)
    }

    /// Normalizes nonnegative weights; `unseen` is the weight of the unseen slot.
    pub fn from_weights(weights: BTreeMap<CommunityId, f64>, unseen: f64) -> Result<Self> {
        let total: f64 = weights.values().sum::<f64>() + unseen;
        if !(total > 0.0) || weights.values().any(|w| *w < 0.0) || unseen < 0.0 {
            return Err(Error::InvalidInput(
                "predictive weights must be nonnegative with positive total".into(),
            ));
        }
        Self::new(
            weights.into_iter().map(|(c, w)| (c, w / total)).collect(),
            unseen / total,
        )
    }

    fn validate(&self) -> Result<()> {
        let entries = self.probs.values().chain(std::iter::once(&self.unseen));
        if entries.clone().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidInput(
                "probabilities must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = entries.sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "predictive distribution sums to {total}"
            )));
        }
        Ok(())
    }

    pub fn probs(&self) -> &BTreeMap<CommunityId, f64> {
        &self.probs
    }

    pub fn unseen(&self) -> f64 {
        self.unseen
    }

    /// Probability of `community`, falling back to the unseen slot.
    pub fn prob(&self, community: &str) -> f64 {
        self.probs.get(community).copied().unwrap_or(self.unseen)
    }

    pub fn total(&self) -> f64 {
        self.probs.values().sum::<f64>() + self.unseen
    }

    fn from_state(state: &PropensityState) -> Result<Self> {
        let p = state.choice_distribution()?;
        let probs = state
            .communities()
            .iter()
            .zip(&p)
            .map(|(c, x)| (c.clone(), *x))
            .collect();
        Ok(Self {
            probs,
            unseen: p[state.unseen_slot()],
        })
    }
}

pub fn quadratic_score(dist: &PredictiveDistribution, outcome: &str) -> f64 {
    let sum_sq = dist.probs.values().map(|p| p * p).sum::<f64>() + dist.unseen * dist.unseen;
    2.0 * dist.prob(outcome) - sum_sq
}

fn observed(actions: &[Action], normalizer: &ReplyNormalizer) -> Vec<ObservedAction> {
    actions
        .iter()
        .map(|a| ObservedAction::new(a.community.clone(), normalizer.normalize(a.feedback)))
        .collect()
}

/// Replays `history` from `q0` and returns the next-choice distribution.
pub fn replay_predictive(
    params: &ModelParams,
    normalizer: &ReplyNormalizer,
    q0: &[f64],
    history: &[Action],
) -> Result<PredictiveDistribution> {
    let popularity = &params.hdp.popularity;
    let mut state = PropensityState::new(popularity.communities.clone(), q0.to_vec())?;
    for a in history {
        let slot = match state.slot_of(&a.community) {
            Some(s) => s,
            None => {
                let remaining = state.q0()[state.unseen_slot()];
                let f = split_fraction(None, remaining);
                state.grow_in_place(&a.community, f)?
            }
        };
        let reward = params.reward.eval(&normalizer.normalize(a.feedback));
        state.update_in_place(slot, reward, &params.learning)?;
    }
    PredictiveDistribution::from_state(&state)
}

/// Next-action distribution for `user` under the fitted model. Users without
/// a stored estimate get one from `history`, which for an empty history is
/// the prior mean.
pub fn predict_next(fit: &FitResult, user: &str, history: &[Action]) -> Result<PredictiveDistribution> {
    let params = &fit.map_params;
    let q0 = match fit.per_user_q0.get(user) {
        Some(q0) => q0.clone(),
        None => estimate_q0_map(&observed(history, &fit.normalizer), params, 500)?,
    };
    replay_predictive(params, &fit.normalizer, &q0, history)
}

/// The part of one user's history a predictor may train on.
#[derive(Clone, Copy, Debug)]
pub struct TrainingWindow<'a> {
    pub user: &'a str,
    pub start_seq: u64,
    pub actions: &'a [Action],
}

/// A prediction method: trained on per-user windows, then queried with the
/// user's history (window plus already-revealed test events).
pub trait Predictor: Sync {
    fn name(&self) -> String;

    fn prepare<'a>(&'a self, windows: &[TrainingWindow<'_>]) -> Result<Box<dyn Forecaster + 'a>>;
}

pub trait Forecaster: Sync {
    fn forecast(&self, user: &str, next_seq: u64, history: &[Action]) -> Result<PredictiveDistribution>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaselineKind {
    Global,
    UserAll,
    UserKMax,
    Initial,
    InitKMax,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::UserAll,
        BaselineKind::UserKMax,
        BaselineKind::Initial,
        BaselineKind::InitKMax,
        BaselineKind::Global,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::Global => "Global",
            BaselineKind::UserAll => "UserAll",
            BaselineKind::UserKMax => "UserKMax",
            BaselineKind::Initial => "Initial",
            BaselineKind::InitKMax => "InitKMax",
        }
    }
}

/// Frequency and no-learning baselines.
#[derive(Clone, Debug)]
pub struct Baseline {
    pub kind: BaselineKind,
    /// Window length for the `*KMax` variants.
    pub k: usize,
    /// Pseudo-count per known community in `Global`.
    pub smoothing: f64,
    /// Pseudo-count of the unseen slot in `Global`.
    pub unseen_pseudocount: f64,
    /// Total pseudo-count with which `UserAll` / `UserKMax` frequencies are
    /// shrunk towards the global ones. A fixed total keeps short windows
    /// informative however many communities the corpus has.
    pub prior_mass: f64,
    /// Prior for `Initial` / `InitKMax`.
    pub hdp: Option<HdpParams>,
}

impl Baseline {
    pub fn new(kind: BaselineKind, k: usize, hdp: Option<HdpParams>) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        if matches!(kind, BaselineKind::Initial | BaselineKind::InitKMax) && hdp.is_none() {
            return Err(Error::InvalidArgument(format!(
                "{} needs prior parameters",
                kind.name()
            )));
        }
        Ok(Self {
            kind,
            k,
            smoothing: 0.5,
            unseen_pseudocount: 0.5,
            prior_mass: 1.0,
            hdp,
        })
    }

    fn recent<'h>(&self, history: &'h [Action]) -> &'h [Action] {
        match self.kind {
            BaselineKind::UserKMax | BaselineKind::InitKMax => {
                &history[history.len().saturating_sub(self.k)..]
            }
            _ => history,
        }
    }

    fn smoothed(&self, support: &[CommunityId], actions: &[Action]) -> Result<PredictiveDistribution> {
        let mut weights: BTreeMap<CommunityId, f64> =
            support.iter().map(|c| (c.clone(), self.smoothing)).collect();
        for a in actions {
            *weights.entry(a.community.clone()).or_insert(self.smoothing) += 1.0;
        }
        PredictiveDistribution::from_weights(weights, self.unseen_pseudocount)
    }

    fn shrunk(&self, global: &PredictiveDistribution, actions: &[Action]) -> Result<PredictiveDistribution> {
        let m = self.prior_mass;
        let mut weights: BTreeMap<CommunityId, f64> = global.probs().iter().map(|(c, p)| (c.clone(), m * p)).collect();
        for a in actions {
            *weights.entry(a.community.clone()).or_insert(0.0) += 1.0;
        }
        PredictiveDistribution::from_weights(weights, m * global.unseen())
    }

    /// Dirichlet-posterior mean of a no-learning user given `actions`.
    fn posterior_mean(&self, actions: &[Action]) -> Result<PredictiveDistribution> {
        let hdp = self.hdp.as_ref().expect("checked in new");
        let pop = &hdp.popularity;
        let mut weights: BTreeMap<CommunityId, f64> = pop
            .communities
            .iter()
            .zip(&pop.beta)
            .map(|(c, b)| (c.clone(), hdp.alpha0 * b))
            .collect();
        for a in actions {
            *weights.entry(a.community.clone()).or_insert(0.0) += 1.0;
        }
        PredictiveDistribution::from_weights(weights, hdp.alpha0 * pop.beta_unseen)
    }

    /// Stand-alone prediction from a training log and a user's history.
    pub fn predict(&self, training: &EventLog, history: &[Action]) -> Result<PredictiveDistribution> {
        let support = support_of(training.records().iter().map(|r| r.community.as_str()));
        let global = || {
            let all: Vec<Action> = training
                .records()
                .iter()
                .map(|r| Action::new(r.community.clone(), r.replies, r.score))
                .collect();
            self.smoothed(&support, &all)
        };
        match self.kind {
            BaselineKind::Global => global(),
            BaselineKind::UserAll | BaselineKind::UserKMax => self.shrunk(&global()?, self.recent(history)),
            BaselineKind::Initial | BaselineKind::InitKMax => {
                self.posterior_mean(self.recent(history))
            }
        }
    }
}

fn support_of<'a, I: Iterator<Item = &'a str>>(communities: I) -> Vec<CommunityId> {
    let set: std::collections::BTreeSet<&str> = communities.collect();
    set.into_iter().map(|c| c.to_string()).collect()
}

struct BaselineForecaster<'a> {
    baseline: &'a Baseline,
    global: Option<PredictiveDistribution>,
}

impl Forecaster for BaselineForecaster<'_> {
    fn forecast(&self, _user: &str, _next_seq: u64, history: &[Action]) -> Result<PredictiveDistribution> {
        let b = self.baseline;
        match b.kind {
            BaselineKind::Global => Ok(self.global.clone().expect("prepared")),
            BaselineKind::UserAll | BaselineKind::UserKMax => {
                b.shrunk(self.global.as_ref().expect("prepared"), b.recent(history))
            }
            BaselineKind::Initial | BaselineKind::InitKMax => b.posterior_mean(b.recent(history)),
        }
    }
}

impl Predictor for Baseline {
    fn name(&self) -> String {
        self.kind.name().to_string()
    }

    fn prepare<'a>(&'a self, windows: &[TrainingWindow<'_>]) -> Result<Box<dyn Forecaster + 'a>> {
        let support = support_of(
            windows
                .iter()
                .flat_map(|w| w.actions.iter().map(|a| a.community.as_str())),
        );
        let global = if matches!(self.kind, BaselineKind::Initial | BaselineKind::InitKMax) {
            None
        } else {
            let all: Vec<Action> = windows.iter().flat_map(|w| w.actions.iter().cloned()).collect();
            Some(self.smoothed(&support, &all)?)
        };
        Ok(Box::new(BaselineForecaster { baseline: self, global }))
    }
}

/// The learning model with fixed global parameters; per-user initial
/// propensities are re-estimated from each training window.
#[derive(Clone, Debug)]
pub struct FullModel {
    pub params: ModelParams,
    pub normalizer: ReplyNormalizer,
    pub q0_iterations: usize,
    pub execution: Execution,
}

impl FullModel {
    pub fn from_fit(fit: &FitResult) -> Self {
        Self {
            params: fit.map_params.clone(),
            normalizer: fit.normalizer,
            q0_iterations: 500,
            execution: Execution::default(),
        }
    }
}

struct FullModelForecaster<'a> {
    model: &'a FullModel,
    q0: HashMap<String, Vec<f64>>,
}

impl Forecaster for FullModelForecaster<'_> {
    fn forecast(&self, user: &str, _next_seq: u64, history: &[Action]) -> Result<PredictiveDistribution> {
        let m = self.model;
        match self.q0.get(user) {
            Some(q0) => replay_predictive(&m.params, &m.normalizer, q0, history),
            None => replay_predictive(&m.params, &m.normalizer, &m.params.hdp.prior_mean(), history),
        }
    }
}

impl Predictor for FullModel {
    fn name(&self) -> String {
        "FullModel".to_string()
    }

    fn prepare<'a>(&'a self, windows: &[TrainingWindow<'_>]) -> Result<Box<dyn Forecaster + 'a>> {
        let estimates = self.execution.map(windows, |w| {
            estimate_q0_map(&observed(w.actions, &self.normalizer), &self.params, self.q0_iterations)
        });
        let mut q0 = HashMap::with_capacity(windows.len());
        for (w, est) in windows.iter().zip(estimates) {
            q0.insert(w.user.to_string(), est?);
        }
        Ok(Box::new(FullModelForecaster { model: self, q0 }))
    }
}

/// The five baselines plus the full model, configured from a fit.
pub fn standard_predictors(fit: &FitResult, k: usize) -> Result<Vec<Box<dyn Predictor>>> {
    let mut out: Vec<Box<dyn Predictor>> = vec![Box::new(FullModel::from_fit(fit))];
    for kind in BaselineKind::ALL {
        out.push(Box::new(Baseline::new(kind, k, Some(fit.map_params.hdp.clone()))?));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Share of each user's actions held out as the final test suffix.
    pub test_fraction: f64,
    /// Users with fewer actions are left out entirely.
    pub min_actions: usize,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            min_actions: 10,
            execution: Execution::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub training_fraction: f64,
    pub predictor: String,
    pub mean_score: f64,
    /// Standard error of the mean of per-user average scores.
    pub std_error: f64,
    pub n_test_events: usize,
    pub n_users: usize,
    pub per_user_scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// SHA-256 over the `(user, seq)` pairs of the held-out events.
    pub test_set_hash: String,
    /// Users left out for having fewer than `min_actions` actions.
    pub skipped_short_users: usize,
    /// (fraction, count) of users skipped because their window was empty.
    pub skipped_empty_windows: Vec<(f64, usize)>,
}

impl SweepResult {
    pub fn row(&self, fraction: f64, predictor: &str) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.training_fraction == fraction && r.predictor == predictor)
    }
}

/// The log with every eligible user's test suffix removed, for fitting a
/// model that the sweep then scores without leakage. Users too short to be
/// tested are kept whole.
pub fn training_log(log: &EventLog, cfg: &SweepConfig) -> EventLog {
    let min_actions = cfg.min_actions.max(2);
    let users: Vec<UserSequence> = log
        .users()
        .into_iter()
        .map(|mut u| {
            let n = u.actions.len();
            if n >= min_actions {
                u.actions.truncate(n - test_len(cfg.test_fraction, n));
            }
            u
        })
        .collect();
    EventLog::from_users(&users)
}

fn test_len(test_fraction: f64, n: usize) -> usize {
    ((test_fraction * n as f64).ceil() as usize).clamp(1, n - 1)
}

struct Split<'a> {
    user: &'a UserSequence,
    prefix_len: usize,
}

/// Mean quadratic score of each predictor at each training fraction.
///
/// The final `test_fraction` of every eligible user's actions is the test
/// set for all fractions. At fraction `f` a predictor trains on the most
/// recent `ceil(f * prefix)` actions before the test suffix, so growing `f`
/// adds older history. Test events are predicted one step ahead from the
/// window plus the test events already revealed.
pub fn training_fraction_sweep(
    log: &EventLog,
    fractions: &[f64],
    predictors: &[&dyn Predictor],
    cfg: &SweepConfig,
) -> Result<SweepResult> {
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::InvalidArgument(format!(
            "training fractions must lie in (0, 1], got {f}"
        )));
    }
    if !(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must lie in (0, 1), got {}",
            cfg.test_fraction
        )));
    }
    let names: Vec<String> = predictors.iter().map(|p| p.name()).collect();
    let unique: HashSet<&String> = names.iter().collect();
    if unique.len() != names.len() {
        return Err(Error::InvalidArgument("predictor names must be unique".into()));
    }
    let users = log.users();
    let min_actions = cfg.min_actions.max(2);
    let splits: Vec<Split> = users
        .iter()
        .filter(|u| u.actions.len() >= min_actions)
        .map(|u| {
            let n = u.actions.len();
            Split {
                user: u,
                prefix_len: n - test_len(cfg.test_fraction, n),
            }
        })
        .collect();
    let skipped_short_users = users.len() - splits.len();

    let mut hasher = Sha256::new();
    for s in &splits {
        for seq in s.prefix_len..s.user.actions.len() {
            hasher.update(s.user.user.as_bytes());
            hasher.update(b"\t");
            hasher.update(seq.to_string().as_bytes());
            hasher.update(b"\n");
        }
    }
    let test_set_hash = hex::encode(hasher.finalize());

    let mut rows = Vec::new();
    let mut skipped_empty_windows = Vec::new();
    for &f in fractions {
        let mut starts = Vec::new();
        let mut active = Vec::new();
        for s in &splits {
            let len = (f * s.prefix_len as f64).ceil() as usize;
            if len == 0 {
                continue;
            }
            starts.push(s.prefix_len - len.min(s.prefix_len));
            active.push(s);
        }
        skipped_empty_windows.push((f, splits.len() - active.len()));
        let windows: Vec<TrainingWindow> = active
            .iter()
            .zip(&starts)
            .map(|(s, &start)| TrainingWindow {
                user: &s.user.user,
                start_seq: start as u64,
                actions: &s.user.actions[start..s.prefix_len],
            })
            .collect();
        for (p, name) in predictors.iter().zip(&names) {
            let forecaster = p.prepare(&windows)?;
            let idx: Vec<usize> = (0..active.len()).collect();
            let per_user = cfg.execution.map(&idx, |&i| -> Result<(f64, usize)> {
                let s = active[i];
                let start = starts[i];
                let acts = &s.user.actions;
                let mut total = 0.0;
                for j in s.prefix_len..acts.len() {
                    let dist = forecaster.forecast(&s.user.user, j as u64, &acts[start..j])?;
                    total += quadratic_score(&dist, &acts[j].community);
                }
                Ok((total, acts.len() - s.prefix_len))
            });
            let mut sum = 0.0;
            let mut n_events = 0;
            let mut user_means = Vec::with_capacity(per_user.len());
            for r in per_user {
                let (total, n) = r?;
                sum += total;
                n_events += n;
                user_means.push(total / n as f64);
            }
            rows.push(SweepRow {
                training_fraction: f,
                predictor: name.clone(),
                mean_score: if n_events > 0 { sum / n_events as f64 } else { f64::NAN },
                std_error: std_error(&user_means),
                n_test_events: n_events,
                n_users: user_means.len(),
                per_user_scores: user_means,
            });
        }
    }
    Ok(SweepResult {
        rows,
        test_set_hash,
        skipped_short_users,
        skipped_empty_windows,
    })
}

pub(crate) fn std_error(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Reply-count buckets given by inclusive lower bounds; the last is open-ended.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplyBuckets {
    pub lower_bounds: Vec<u32>,
}

impl Default for ReplyBuckets {
    fn default() -> Self {
        Self {
            lower_bounds: vec![0, 1, 2, 3, 5],
        }
    }
}

impl ReplyBuckets {
    pub fn new(lower_bounds: Vec<u32>) -> Result<Self> {
        if lower_bounds.first() != Some(&0) || lower_bounds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "bucket lower bounds must start at 0 and increase strictly".into(),
            ));
        }
        Ok(Self { lower_bounds })
    }

    fn bucket_of(&self, replies: u32) -> usize {
        self.lower_bounds.partition_point(|b| *b <= replies) - 1
    }

    pub fn label(&self, i: usize) -> String {
        let lo = self.lower_bounds[i];
        match self.lower_bounds.get(i + 1) {
            None => format!("{lo}+"),
            Some(next) if next - 1 == lo => lo.to_string(),
            Some(next) => format!("{lo}-{}", next - 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketResponse {
    pub label: String,
    pub lower: u32,
    /// Actions in this bucket that have a next action by the same user.
    pub transitions: usize,
    /// Of those, how many were followed by a return to the same community.
    pub returns: usize,
    pub return_rate: Option<f64>,
    /// Return rate relative to the zero-reply bucket; `None` when undefined.
    pub relative: Option<f64>,
    /// Delta-method standard error of `relative`.
    pub std_error: Option<f64>,
}

pub fn feedback_response_curve(log: &EventLog, buckets: &ReplyBuckets) -> Vec<BucketResponse> {
    let nb = buckets.lower_bounds.len();
    let mut transitions = vec![0usize; nb];
    let mut returns = vec![0usize; nb];
    for u in log.users() {
        for pair in u.actions.windows(2) {
            let b = buckets.bucket_of(pair[0].feedback.replies);
            transitions[b] += 1;
            returns[b] += usize::from(pair[1].community == pair[0].community);
        }
    }
    let rate = |b: usize| (transitions[b] > 0).then(|| returns[b] as f64 / transitions[b] as f64);
    let base = rate(0).filter(|r| *r > 0.0);
    (0..nb)
        .map(|b| {
            let r = rate(b);
            let (relative, std_error) = match (r, base) {
                (Some(_), Some(_)) if b == 0 => (Some(1.0), Some(0.0)),
                (Some(rb), Some(r0)) => {
                    let rel = rb / r0;
                    let term = |p: f64, n: usize| {
                        if p > 0.0 {
                            (1.0 - p) / (n as f64 * p)
                        } else {
                            f64::INFINITY
                        }
                    };
                    let se = rel * (term(rb, transitions[b]) + term(r0, transitions[0])).sqrt();
                    (Some(rel), Some(se))
                }
                _ => (None, None),
            };
            BucketResponse {
                label: buckets.label(b),
                lower: buckets.lower_bounds[b],
                transitions: transitions[b],
                returns: returns[b],
                return_rate: r,
                relative,
                std_error,
            }
        })
        .collect()
}
