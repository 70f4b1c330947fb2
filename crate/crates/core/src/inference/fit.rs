use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::EventLog;
use crate::exec::Execution;
use crate::hdp::{dirichlet_ln_pdf_logratio, estimate_beta, BetaEstimate, HdpParams};
use crate::model::{LearningParams, ReplyNormalizer, RewardFunction};
use crate::params::ModelParams;

use super::likelihood::{PreparedLog, Trace};
use super::mode::kde_log_density;
use super::priors::{Prior, Priors};
use super::q0::{
    attribution_counts, dirichlet_multinomial_ln, refine_q0, sample_attribution,
    sample_q0_given_counts, Q0_TOL,
};

/// How per-user initial propensities are handled during sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Q0Treatment {
    /// Gibbs draws by data augmentation, one per iteration.
    SampleLatent,
    /// Coordinate ascent to the conditional mode, interleaved with the
    /// parameter moves.
    MapPointEstimate,
    /// Held at the given vectors (users not listed start at the prior mean).
    Fixed(BTreeMap<String, Vec<f64>>),
}

/// Random-walk step sizes. Unit-interval parameters move on the logit scale,
/// `alpha0` and the joint reward rescaling on the log scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalScales {
    pub learning: f64,
    pub w_replies: f64,
    pub w_votes: f64,
    pub w_intercept: f64,
    pub reward_scale: f64,
    pub alpha0: f64,
}

impl Default for ProposalScales {
    fn default() -> Self {
        Self {
            learning: 0.1,
            w_replies: 0.05,
            w_votes: 0.05,
            w_intercept: 0.05,
            reward_scale: 0.05,
            alpha0: 0.2,
        }
    }
}

/// Which parameter blocks the sampler moves. Disabled blocks stay at their
/// initial values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blocks {
    pub learning: bool,
    pub reward: bool,
    pub alpha0: bool,
}

impl Default for Blocks {
    fn default() -> Self {
        Self {
            learning: true,
            reward: true,
            alpha0: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialParams {
    pub phi: f64,
    pub epsilon: f64,
    pub w_replies: f64,
    pub w_votes: f64,
    pub w_intercept: f64,
    pub alpha0: f64,
}

impl Default for InitialParams {
    fn default() -> Self {
        Self {
            phi: 0.2,
            epsilon: 0.2,
            w_replies: 0.5,
            w_votes: 0.5,
            w_intercept: 0.0,
            alpha0: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Total iterations, burn-in included.
    pub n_samples: usize,
    pub burn_in: usize,
    pub proposal_scales: ProposalScales,
    /// Tune proposal scales towards target acceptance rates during burn-in.
    pub adapt: bool,
    pub q0_treatment: Q0Treatment,
    /// Upper bound on coordinate-ascent steps per user per iteration.
    pub q0_max_iter: usize,
    pub rng_seed: u64,
    pub priors: Priors,
    pub blocks: Blocks,
    pub init: InitialParams,
    pub beta: BetaEstimate,
    /// Reply normalization cap; the 99th percentile of the log when unset.
    pub reply_cap: Option<f64>,
    pub reward_floor: f64,
    pub prob_floor: f64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_samples: 2_000,
            burn_in: 500,
            proposal_scales: ProposalScales::default(),
            adapt: true,
            q0_treatment: Q0Treatment::MapPointEstimate,
            q0_max_iter: 25,
            rng_seed: 0,
            priors: Priors::default(),
            blocks: Blocks::default(),
            init: InitialParams::default(),
            beta: BetaEstimate::default(),
            reply_cap: None,
            reward_floor: 0.0,
            prob_floor: 1e-12,
            execution: Execution::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples <= self.burn_in {
            return Err(Error::InvalidArgument(format!(
                "n_samples ({}) must exceed burn_in ({})",
                self.n_samples, self.burn_in
            )));
        }
        let s = &self.proposal_scales;
        let scales = [
            s.learning,
            s.w_replies,
            s.w_votes,
            s.w_intercept,
            s.reward_scale,
            s.alpha0,
        ];
        if scales.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "proposal scales must be positive, got {s:?}"
            )));
        }
        if !(self.prob_floor >= 0.0 && self.reward_floor >= 0.0) {
            return Err(Error::InvalidArgument("floors must be nonnegative".into()));
        }
        Ok(())
    }
}

/// The sampled scalars of one retained iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSample {
    pub phi: f64,
    pub epsilon: f64,
    pub w_replies: f64,
    pub w_votes: f64,
    pub w_intercept: f64,
    pub alpha0: f64,
    /// Log posterior density of the parameters, up to a constant. With
    /// point-estimated or fixed `q0`s this is the sampled joint. With latent
    /// `q0`s it is a kernel density estimate over the retained draws, since
    /// the joint with sampled `q0`s peaks where those overfit.
    pub log_posterior: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Acceptance rate per proposal kind over the retained iterations.
    pub acceptance: BTreeMap<String, f64>,
    pub final_scales: ProposalScales,
    pub initial_log_posterior: f64,
    pub n_users: usize,
    pub n_actions: usize,
    pub retained: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub map_params: ModelParams,
    pub map_log_posterior: f64,
    pub posterior_samples: Vec<PosteriorSample>,
    /// Initial propensities at the MAP state (posterior means under the
    /// latent treatment), one vector per user over the communities of
    /// `map_params` plus the unseen slot.
    pub per_user_q0: BTreeMap<String, Vec<f64>>,
    pub diagnostics: Diagnostics,
    pub normalizer: ReplyNormalizer,
    pub priors: Priors,
    pub config: FitConfig,
}

impl FitResult {
    /// Full parameter set for a retained sample.
    pub fn sample_params(&self, s: &PosteriorSample) -> ModelParams {
        let mut p = self.map_params.clone();
        p.learning = LearningParams {
            phi: s.phi,
            epsilon: s.epsilon,
        };
        p.reward.w_replies = s.w_replies;
        p.reward.w_votes = s.w_votes;
        p.reward.w_intercept = s.w_intercept;
        p.hdp.alpha0 = s.alpha0;
        p
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Theta {
    phi: f64,
    epsilon: f64,
    w: [f64; 3],
    alpha0: f64,
}

impl Theta {
    fn learning(&self) -> LearningParams {
        LearningParams {
            phi: self.phi,
            epsilon: self.epsilon,
        }
    }

    fn reward(&self, floor: f64) -> RewardFunction {
        RewardFunction {
            w_replies: self.w[0],
            w_votes: self.w[1],
            w_intercept: self.w[2],
            floor,
        }
    }

    fn ln_prior(&self, p: &Priors) -> f64 {
        p.ln_learning(self.phi, self.epsilon)
            + p.ln_reward(self.w[0], self.w[1], self.w[2])
            + p.alpha0.ln_pdf(self.alpha0)
    }

    fn from_sample(s: &PosteriorSample) -> Self {
        Self {
            phi: s.phi,
            epsilon: s.epsilon,
            w: [s.w_replies, s.w_votes, s.w_intercept],
            alpha0: s.alpha0,
        }
    }

    /// Coordinates of the sampled blocks on the scales the proposals use.
    fn free_coords(&self, blocks: &Blocks) -> Vec<f64> {
        let mut v = Vec::with_capacity(6);
        if blocks.learning {
            v.push(logit(self.phi));
            v.push(logit(self.epsilon));
        }
        if blocks.reward {
            v.extend_from_slice(&self.w);
        }
        if blocks.alpha0 {
            v.push(self.alpha0.ln());
        }
        v
    }

    /// `ln |d coords / d params|` for [`Self::free_coords`].
    fn free_log_jacobian(&self, blocks: &Blocks) -> f64 {
        let mut j = 0.0;
        if blocks.learning {
            j -= (self.phi * (1.0 - self.phi)).ln() + (self.epsilon * (1.0 - self.epsilon)).ln();
        }
        if blocks.alpha0 {
            j -= self.alpha0.ln();
        }
        j
    }

    fn from_init(i: &InitialParams) -> Self {
        Self {
            phi: i.phi,
            epsilon: i.epsilon,
            w: [i.w_replies, i.w_votes, i.w_intercept],
            alpha0: i.alpha0,
        }
    }

    fn from_priors<R: Rng>(p: &Priors, rng: &mut R) -> Self {
        Self {
            phi: draw_prior(&p.phi, rng).clamp(1e-6, 1.0 - 1e-6),
            epsilon: draw_prior(&p.epsilon, rng).clamp(1e-6, 1.0 - 1e-6),
            w: [
                draw_prior(&p.w_replies, rng),
                draw_prior(&p.w_votes, rng),
                draw_prior(&p.w_intercept, rng),
            ],
            alpha0: draw_prior(&p.alpha0, rng).max(1e-6),
        }
    }
}

fn draw_prior<R: Rng>(p: &Prior, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    match *p {
        Prior::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
        Prior::Normal { mean, sd } => mean + sd * z,
        Prior::LogNormal { mu, sigma } => (mu + sigma * z).exp(),
    }
}

fn logit(x: f64) -> f64 {
    (x / (1.0 - x)).ln()
}

fn sigmoid(y: f64) -> f64 {
    1.0 / (1.0 + (-y).exp())
}

/// Per-user sampler state. `q0`, `base` and `counts` are over the user's
/// visited slots plus one remainder slot.
struct UserChain {
    trace: Trace,
    q0: Vec<f64>,
    base: Vec<f64>,
    /// Choices attributed to the initial propensities at the last q0 step.
    counts: Vec<f64>,
    ll: f64,
    dir: f64,
    rng: ChaCha8Rng,
}

impl UserChain {
    fn alpha(&self, alpha0: f64) -> Vec<f64> {
        self.base.iter().map(|b| alpha0 * b).collect()
    }
}

#[derive(Default, Clone, Copy)]
struct Counter {
    window_tries: u32,
    window_hits: u32,
    kept_tries: u64,
    kept_hits: u64,
}

impl Counter {
    fn record(&mut self, accepted: bool, retained: bool) {
        self.window_tries += 1;
        self.window_hits += u32::from(accepted);
        if retained {
            self.kept_tries += 1;
            self.kept_hits += u64::from(accepted);
        }
    }

    /// Robbins-Monro style nudge of a proposal scale.
    fn adapt(&mut self, scale: &mut f64, target: f64) {
        if self.window_tries == 0 {
            return;
        }
        let rate = f64::from(self.window_hits) / f64::from(self.window_tries);
        *scale = (*scale * (2.0 * (rate - target)).exp()).clamp(1e-4, 5.0);
        self.window_tries = 0;
        self.window_hits = 0;
    }

    fn rate(&self) -> f64 {
        if self.kept_tries == 0 {
            0.0
        } else {
            self.kept_hits as f64 / self.kept_tries as f64
        }
    }
}

const ADAPT_EVERY: usize = 50;

struct Sampler<'a> {
    cfg: &'a FitConfig,
    prepared: &'a PreparedLog,
    base: Vec<f64>,
    chains: Vec<UserChain>,
    theta: Theta,
    ll_sum: f64,
    dir_sum: f64,
    scales: ProposalScales,
    exec: Execution,
}

impl Sampler<'_> {

    fn log_posterior(&self) -> f64 {
        self.ll_sum + self.dir_sum + self.theta.ln_prior(&self.cfg.priors)
    }

    /// Traces and log-likelihoods of every user at a candidate parameter set,
    /// keeping the current `q0`s.
    fn evaluate(&self, theta: &Theta) -> (Vec<(Trace, f64)>, f64) {
        let learning = theta.learning();
        let reward = theta.reward(self.cfg.reward_floor);
        let floor = self.cfg.prob_floor;
        let chains = &self.chains;
        let users = &self.prepared.users;
        let out = self.exec.map_range(users.len(), |i| {
            let t = users[i].trace(&learning, &reward);
            let ll = t.log_likelihood(&chains[i].q0, &users[i].local, floor);
            (t, ll)
        });
        let total = out.iter().map(|(_, ll)| ll).sum();
        (out, total)
    }

    fn install(&mut self, theta: Theta, evaluated: Vec<(Trace, f64)>, ll_sum: f64) {
        for (c, (t, ll)) in self.chains.iter_mut().zip(evaluated) {
            c.trace = t;
            c.ll = ll;
        }
        self.theta = theta;
        self.ll_sum = ll_sum;
    }

    fn reset_all(&mut self) {
        let theta = self.theta;
        let (evaluated, total) = self.evaluate(&theta);
        self.install(theta, evaluated, total);
        self.refresh_dirichlet();
    }

    fn refresh_dirichlet(&mut self) {
        let alpha0 = self.theta.alpha0;
        let terms = self
            .exec
            .map(&self.chains, |c| dirichlet_ln_pdf_logratio(&c.q0, &c.alpha(alpha0)));
        for (c, d) in self.chains.iter_mut().zip(&terms) {
            c.dir = *d;
        }
        self.dir_sum = terms.iter().sum();
    }

    /// First half of the q0 update. Latent: sample attribution counts given
    /// the current `q0`. Point estimate: move `q0` towards the conditional
    /// mode and record its expected attribution counts.
    fn attribution_step(&mut self, max_iter: usize) {
        let alpha0 = self.theta.alpha0;
        let users = &self.prepared.users;
        let latent = matches!(self.cfg.q0_treatment, Q0Treatment::SampleLatent);
        let mut indexed: Vec<(usize, &mut UserChain)> = self.chains.iter_mut().enumerate().collect();
        self.exec.map_mut(&mut indexed, |(u, c)| {
            let local = &users[*u].local;
            if latent {
                sample_attribution(&c.trace, local, &c.q0, &mut c.counts, &mut c.rng);
            } else {
                let alpha = c.alpha(alpha0);
                refine_q0(&c.trace, local, &alpha, &mut c.q0, max_iter, Q0_TOL);
                attribution_counts(&c.trace, local, &c.q0, &mut c.counts);
            }
        });
    }

    /// Second half: latent `q0`s are redrawn from their conjugate Dirichlet;
    /// then likelihood and prior terms are brought up to date.
    fn q0_finish_step(&mut self) -> Result<()> {
        let alpha0 = self.theta.alpha0;
        let floor = self.cfg.prob_floor;
        let users = &self.prepared.users;
        let latent = matches!(self.cfg.q0_treatment, Q0Treatment::SampleLatent);
        let mut indexed: Vec<(usize, &mut UserChain)> = self.chains.iter_mut().enumerate().collect();
        let results = self.exec.map_mut(&mut indexed, |(u, c)| -> Result<()> {
            let alpha = c.alpha(alpha0);
            if latent {
                c.q0 = sample_q0_given_counts(&alpha, &c.counts, &mut c.rng)?;
            }
            c.ll = c.trace.log_likelihood(&c.q0, &users[*u].local, floor);
            c.dir = dirichlet_ln_pdf_logratio(&c.q0, &alpha);
            Ok(())
        });
        results.into_iter().collect::<Result<()>>()?;
        self.ll_sum = self.chains.iter().map(|c| c.ll).sum();
        self.dir_sum = self.chains.iter().map(|c| c.dir).sum();
        Ok(())
    }

    fn q0_step(&mut self, max_iter: usize) -> Result<()> {
        self.attribution_step(max_iter);
        self.q0_finish_step()
    }

    fn learning_step(&mut self, rng: &mut ChaCha8Rng) -> bool {
        let cur = self.theta;
        let s = self.scales.learning;
        let y_phi = logit(cur.phi) + s * rng.sample::<f64, _>(StandardNormal);
        let y_eps = logit(cur.epsilon) + s * rng.sample::<f64, _>(StandardNormal);
        let prop = Theta {
            phi: sigmoid(y_phi),
            epsilon: sigmoid(y_eps),
            ..cur
        };
        let jac = |t: &Theta| (t.phi * (1.0 - t.phi) * t.epsilon * (1.0 - t.epsilon)).ln();
        let priors = &self.cfg.priors;
        let cur_target = self.ll_sum + priors.ln_learning(cur.phi, cur.epsilon) + jac(&cur);
        let prop_prior = priors.ln_learning(prop.phi, prop.epsilon) + jac(&prop);
        if !prop_prior.is_finite() {
            return false;
        }
        let (evaluated, ll) = self.evaluate(&prop);
        let ratio = ll + prop_prior - cur_target;
        self.accept(rng, ratio, prop, evaluated, ll)
    }

    fn reward_component_step(&mut self, rng: &mut ChaCha8Rng, j: usize, scale: f64) -> bool {
        let cur = self.theta;
        let mut prop = cur;
        prop.w[j] += scale * rng.sample::<f64, _>(StandardNormal);
        let priors = &self.cfg.priors;
        let cur_target = self.ll_sum + priors.ln_reward(cur.w[0], cur.w[1], cur.w[2]);
        let prop_prior = priors.ln_reward(prop.w[0], prop.w[1], prop.w[2]);
        let (evaluated, ll) = self.evaluate(&prop);
        let ratio = ll + prop_prior - cur_target;
        self.accept(rng, ratio, prop, evaluated, ll)
    }

    /// Multiplies all reward weights by a common log-normal factor.
    fn reward_scale_step(&mut self, rng: &mut ChaCha8Rng) -> bool {
        let cur = self.theta;
        let u = self.scales.reward_scale * rng.sample::<f64, _>(StandardNormal);
        let lambda = u.exp();
        let mut prop = cur;
        for w in prop.w.iter_mut() {
            *w *= lambda;
        }
        let priors = &self.cfg.priors;
        let cur_target = self.ll_sum + priors.ln_reward(cur.w[0], cur.w[1], cur.w[2]);
        let prop_prior = priors.ln_reward(prop.w[0], prop.w[1], prop.w[2]);
        let (evaluated, ll) = self.evaluate(&prop);
        // Jacobian of the 3-dimensional rescaling
        let ratio = ll + prop_prior - cur_target + 3.0 * u;
        self.accept(rng, ratio, prop, evaluated, ll)
    }

    /// Random walk on `ln alpha0`. With fixed `q0`s the target conditions on
    /// them. Otherwise `q0` is integrated out given the attribution counts
    /// (sampled, or expected under the point estimate) and redrawn right
    /// after, so `(alpha0, q0)` move as one block given the counts. The
    /// conditional form would let `alpha0` drift upwards because q0 entries
    /// with tiny concentrations underflow.
    fn alpha0_step(&mut self, rng: &mut ChaCha8Rng) -> bool {
        let cur = self.theta;
        let y = cur.alpha0.ln() + self.scales.alpha0 * rng.sample::<f64, _>(StandardNormal);
        let prop_alpha0 = y.exp();
        let collapsed = !matches!(self.cfg.q0_treatment, Q0Treatment::Fixed(_));
        let target = |s: &Self, alpha0: f64| -> f64 {
            if collapsed {
                s.exec
                    .sum(&s.chains, |c| dirichlet_multinomial_ln(&c.alpha(alpha0), &c.counts))
            } else {
                s.exec
                    .sum(&s.chains, |c| dirichlet_ln_pdf_logratio(&c.q0, &c.alpha(alpha0)))
            }
        };
        let prior = &self.cfg.priors.alpha0;
        let ratio = target(self, prop_alpha0) + prior.ln_pdf(prop_alpha0) + y
            - (target(self, cur.alpha0) + prior.ln_pdf(cur.alpha0) + cur.alpha0.ln());
        let accepted = rng.random::<f64>().ln() < ratio;
        if accepted {
            self.theta.alpha0 = prop_alpha0;
            self.refresh_dirichlet();
        }
        accepted
    }

    fn accept(
        &mut self,
        rng: &mut ChaCha8Rng,
        ratio: f64,
        prop: Theta,
        evaluated: Vec<(Trace, f64)>,
        ll: f64,
    ) -> bool {
        let u: f64 = rng.random();
        if ratio.is_nan() || u.ln() >= ratio {
            return false;
        }
        self.install(prop, evaluated, ll);
        true
    }

    fn snapshot_q0(&self) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.q0.clone()).collect()
    }
}

/// Metropolis-within-Gibbs over `(phi, epsilon)`, the reward weights and
/// `alpha0`, with per-user initial propensities handled per
/// [`Q0Treatment`]. Global popularity is estimated from the log up front and
/// held fixed. Deterministic given `cfg.rng_seed`.
pub fn fit(log: &EventLog, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    if log.is_empty() {
        return Err(Error::InvalidInput("cannot fit an empty log".into()));
    }
    let normalizer = match cfg.reply_cap {
        Some(cap) => ReplyNormalizer::new(cap)?,
        None => ReplyNormalizer::from_reply_counts(log.reply_counts()),
    };
    let popularity = estimate_beta(log, &cfg.beta)?;
    let prepared = PreparedLog::new(log, &popularity.communities, &normalizer)?;
    let base = popularity.base_measure();
    let n_slots = base.len();

    let chains = prepared
        .users
        .iter()
        .enumerate()
        .map(|(u, pu)| -> Result<UserChain> {
            let q0 = match &cfg.q0_treatment {
                Q0Treatment::Fixed(map) => match map.get(&pu.user) {
                    Some(v) if v.len() == n_slots => pu.compact(v),
                    Some(v) => {
                        return Err(Error::InvalidInput(format!(
                            "fixed q0 for {:?} has {} entries, expected {n_slots}",
                            pu.user,
                            v.len()
                        )))
                    }
                    None => pu.compact(&base),
                },
                _ => pu.compact(&base),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
            rng.set_stream(u as u64 + 1);
            Ok(UserChain {
                trace: Trace::default(),
                base: pu.compact(&base),
                q0,
                counts: Vec::new(),
                ll: 0.0,
                dir: 0.0,
                rng,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut sampler = Sampler {
        cfg,
        prepared: &prepared,
        base,
        chains,
        theta: Theta::from_init(&cfg.init),
        ll_sum: 0.0,
        dir_sum: 0.0,
        scales: cfg.proposal_scales,
        exec: cfg.execution,
    };
    sampler.reset_all();
    let map_mode = matches!(cfg.q0_treatment, Q0Treatment::MapPointEstimate);
    if map_mode {
        sampler.q0_step(1_000)?;
    }
    let mut lp = sampler.log_posterior();
    let mut attempts = 0;
    while !lp.is_finite() {
        if attempts == 200 {
            return Err(Error::Initialization(
                "log-posterior is -inf at the initial point and at 200 prior draws; \
                 widen the priors or move the initial values"
                    .into(),
            ));
        }
        attempts += 1;
        let mut theta = Theta::from_priors(&cfg.priors, &mut rng);
        if !cfg.blocks.learning {
            theta.phi = cfg.init.phi;
            theta.epsilon = cfg.init.epsilon;
        }
        if !cfg.blocks.reward {
            theta.w = [cfg.init.w_replies, cfg.init.w_votes, cfg.init.w_intercept];
        }
        if !cfg.blocks.alpha0 {
            theta.alpha0 = cfg.init.alpha0;
        }
        sampler.theta = theta;
        sampler.reset_all();
        if map_mode {
            sampler.q0_step(1_000)?;
        }
        lp = sampler.log_posterior();
    }
    let mut initial_log_posterior = lp;
    let init_theta = sampler.theta;
    let latent = matches!(cfg.q0_treatment, Q0Treatment::SampleLatent);
    let mut best = (sampler.theta, lp, sampler.snapshot_q0());
    let mut q0_sums: Vec<Vec<f64>> = if latent {
        sampler.chains.iter().map(|c| vec![0.0; c.q0.len()]).collect()
    } else {
        Vec::new()
    };

    let mut c_learning = Counter::default();
    let mut c_w = [Counter::default(); 3];
    let mut c_scale = Counter::default();
    let mut c_alpha0 = Counter::default();
    let mut samples = Vec::with_capacity(cfg.n_samples - cfg.burn_in);

    for t in 0..cfg.n_samples {
        let retained = t >= cfg.burn_in;
        let fixed_q0 = matches!(cfg.q0_treatment, Q0Treatment::Fixed(_));
        if !fixed_q0 {
            sampler.attribution_step(cfg.q0_max_iter);
        }
        if cfg.blocks.alpha0 {
            let ok = sampler.alpha0_step(&mut rng);
            c_alpha0.record(ok, retained);
        }
        if !fixed_q0 {
            sampler.q0_finish_step()?;
        }
        if cfg.blocks.learning {
            let ok = sampler.learning_step(&mut rng);
            c_learning.record(ok, retained);
        }
        if cfg.blocks.reward {
            let scales = [
                sampler.scales.w_replies,
                sampler.scales.w_votes,
                sampler.scales.w_intercept,
            ];
            for (j, counter) in c_w.iter_mut().enumerate() {
                let ok = sampler.reward_component_step(&mut rng, j, scales[j]);
                counter.record(ok, retained);
            }
            let ok = sampler.reward_scale_step(&mut rng);
            c_scale.record(ok, retained);
        }

        let lp = sampler.log_posterior();
        if retained {
            let th = sampler.theta;
            samples.push(PosteriorSample {
                phi: th.phi,
                epsilon: th.epsilon,
                w_replies: th.w[0],
                w_votes: th.w[1],
                w_intercept: th.w[2],
                alpha0: th.alpha0,
                log_posterior: lp,
            });
        }
        if latent {
            if retained {
                for (sum, c) in q0_sums.iter_mut().zip(&sampler.chains) {
                    for (a, b) in sum.iter_mut().zip(&c.q0) {
                        *a += b;
                    }
                }
            }
        } else if lp > best.1 {
            best = (sampler.theta, lp, sampler.snapshot_q0());
        }
        if cfg.adapt && !retained && (t + 1) % ADAPT_EVERY == 0 {
            let s = &mut sampler.scales;
            c_learning.adapt(&mut s.learning, 0.3);
            c_w[0].adapt(&mut s.w_replies, 0.44);
            c_w[1].adapt(&mut s.w_votes, 0.44);
            c_w[2].adapt(&mut s.w_intercept, 0.44);
            c_scale.adapt(&mut s.reward_scale, 0.44);
            c_alpha0.adapt(&mut s.alpha0, 0.44);
        }
    }

    let mut acceptance = BTreeMap::new();
    if cfg.blocks.learning {
        acceptance.insert("learning".to_string(), c_learning.rate());
    }
    if cfg.blocks.reward {
        acceptance.insert("w_replies".to_string(), c_w[0].rate());
        acceptance.insert("w_votes".to_string(), c_w[1].rate());
        acceptance.insert("w_intercept".to_string(), c_w[2].rate());
        acceptance.insert("reward_scale".to_string(), c_scale.rate());
    }
    if cfg.blocks.alpha0 {
        acceptance.insert("alpha0".to_string(), c_alpha0.rate());
    }

    if latent {
        let thetas: Vec<Theta> = samples.iter().map(Theta::from_sample).collect();
        let coords = |t: &Theta| t.free_coords(&cfg.blocks);
        let points: Vec<Vec<f64>> = thetas.iter().map(coords).collect();
        let mut queries = points.clone();
        queries.push(coords(&init_theta));
        let dens = kde_log_density(&points, &queries, cfg.execution);
        let jac = |t: &Theta| t.free_log_jacobian(&cfg.blocks);
        for ((s, d), t) in samples.iter_mut().zip(&dens).zip(&thetas) {
            s.log_posterior = d + jac(t);
        }
        initial_log_posterior = dens[dens.len() - 1] + jac(&init_theta);
        let mut top = (init_theta, initial_log_posterior);
        for (s, t) in samples.iter().zip(&thetas) {
            if s.log_posterior > top.1 {
                top = (*t, s.log_posterior);
            }
        }
        let n = samples.len() as f64;
        let means = q0_sums
            .into_iter()
            .map(|v| v.into_iter().map(|x| x / n).collect())
            .collect();
        best = (top.0, top.1, means);
    }
    let (theta, map_lp, q0s) = best;
    let map_params = ModelParams {
        hdp: HdpParams {
            alpha0: theta.alpha0,
            popularity,
        },
        learning: theta.learning(),
        reward: theta.reward(cfg.reward_floor),
    };
    let per_user_q0 = prepared
        .users
        .iter()
        .zip(q0s)
        .map(|(u, q)| (u.user.clone(), u.expand(&q, &sampler.base)))
        .collect();
    Ok(FitResult {
        map_params,
        map_log_posterior: map_lp,
        diagnostics: Diagnostics {
            acceptance,
            final_scales: sampler.scales,
            initial_log_posterior,
            n_users: prepared.users.len(),
            n_actions: prepared.n_actions(),
            retained: samples.len(),
        },
        posterior_samples: samples,
        per_user_q0,
        normalizer,
        priors: cfg.priors,
        config: cfg.clone(),
    })
}
