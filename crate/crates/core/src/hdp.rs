//! Finite truncation of the hierarchical Dirichlet process prior.
//!
//! The community space is represented as `K` named communities plus one
//! aggregated unseen slot. Global popularity `beta` comes from stick-breaking
//! (or from corpus counts), and each user's initial propensities are a
//! Dirichlet draw with base measure `alpha0 * [beta || beta_unseen]`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::events::EventLog;
use crate::model::{CommunityId, SIMPLEX_TOL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalPopularity {
    pub communities: Vec<CommunityId>,
    pub beta: Vec<f64>,
    pub beta_unseen: f64,
    pub gamma: f64,
}

impl GlobalPopularity {
    pub fn new(
        communities: Vec<CommunityId>,
        beta: Vec<f64>,
        beta_unseen: f64,
        gamma: f64,
    ) -> Result<Self> {
        let gp = Self {
            communities,
            beta,
            beta_unseen,
            gamma,
        };
        gp.validate()?;
        Ok(gp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.communities.len() != self.beta.len() {
            return Err(Error::InvalidInput(format!(
                "{} community names for {} popularity entries",
                self.communities.len(),
                self.beta.len()
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        let entries = self.beta.iter().chain(std::iter::once(&self.beta_unseen));
        if entries.clone().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidInput(
                "popularity entries must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = entries.sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidInput(format!(
                "popularity must sum to 1, sums to {total}"
            )));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.beta.len()
    }

    /// `[beta || beta_unseen]`.
    pub fn base_measure(&self) -> Vec<f64> {
        let mut v = self.beta.clone();
        v.push(self.beta_unseen);
        v
    }

    pub fn share_of(&self, community: &str) -> Option<f64> {
        self.communities
            .iter()
            .position(|c| c == community)
            .map(|i| self.beta[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HdpParams {
    pub alpha0: f64,
    pub popularity: GlobalPopularity,
}

impl HdpParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "alpha0 must be positive, got {}",
                self.alpha0
            )));
        }
        self.popularity.validate()
    }

    pub fn dirichlet_alpha(&self) -> Vec<f64> {
        let mut a: Vec<f64> = self
            .popularity
            .beta
            .iter()
            .map(|b| self.alpha0 * b)
            .collect();
        a.push(self.alpha0 * self.popularity.beta_unseen);
        a
    }

    /// Mean of `Dirichlet(alpha0 * beta)`, which is the base measure itself.
    pub fn prior_mean(&self) -> Vec<f64> {
        self.popularity.base_measure()
    }
}

/// Zero-padded community names `c00`, `c01`, ... for synthetic corpora.
pub fn community_names(k: usize) -> Vec<CommunityId> {
    let width = k.saturating_sub(1).to_string().len().max(2);
    (0..k).map(|i| format!("c{i:0width$}")).collect()
}

/// GEM(gamma) truncated after `k` breaks; the leftover stick is the unseen mass.
pub fn stick_breaking(gamma: f64, k: usize, rng_seed: u64) -> Result<GlobalPopularity> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one community".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut remaining = 1.0;
    let mut beta = Vec::with_capacity(k);
    for _ in 0..k {
        // Beta(1, gamma) by inversion
        let u: f64 = rng.random();
        let v = 1.0 - (1.0 - u).powf(1.0 / gamma);
        beta.push(v * remaining);
        remaining *= 1.0 - v;
    }
    Ok(GlobalPopularity {
        communities: community_names(k),
        beta,
        beta_unseen: remaining,
        gamma,
    })
}

/// Dirichlet draw via log-space gamma variates, so tiny concentrations do not
/// underflow to an all-zero vector. Zero concentrations yield zero entries.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) || !alpha.iter().any(|a| *a > 0.0) {
        return Err(Error::InvalidArgument(
            "Dirichlet concentrations must be nonnegative with at least one positive".into(),
        ));
    }
    let logs: Vec<f64> = alpha
        .iter()
        .map(|&a| {
            if a == 0.0 {
                f64::NEG_INFINITY
            } else if a >= 1.0 {
                let g: f64 = Gamma::new(a, 1.0).expect("valid shape").sample(rng);
                g.ln()
            } else {
                let g: f64 = Gamma::new(a + 1.0, 1.0).expect("valid shape").sample(rng);
                let u: f64 = 1.0 - rng.random::<f64>();
                g.ln() + u.ln() / a
            }
        })
        .collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

pub fn sample_initial_propensities(hdp: &HdpParams, rng_seed: u64) -> Result<Vec<f64>> {
    hdp.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_dirichlet(&hdp.dirichlet_alpha(), &mut rng)
}

/// Standard Dirichlet log density. Slots with zero concentration must carry
/// zero mass and are dropped from the support.
pub fn dirichlet_ln_pdf(q: &[f64], alpha: &[f64]) -> f64 {
    dirichlet_ln_pdf_impl(q, alpha, 1.0)
}

/// Dirichlet log density expressed in additive log-ratio coordinates, i.e.
/// the standard density times the Jacobian `prod_k q_k`. This is the density
/// the samplers and the point estimator work with.
pub fn dirichlet_ln_pdf_logratio(q: &[f64], alpha: &[f64]) -> f64 {
    dirichlet_ln_pdf_impl(q, alpha, 0.0)
}

fn dirichlet_ln_pdf_impl(q: &[f64], alpha: &[f64], offset: f64) -> f64 {
    debug_assert_eq!(q.len(), alpha.len());
    let mut total_alpha = 0.0;
    let mut acc = 0.0;
    for (&x, &a) in q.iter().zip(alpha) {
        if a == 0.0 {
            if x != 0.0 {
                return f64::NEG_INFINITY;
            }
            continue;
        }
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        total_alpha += a;
        acc += (a - offset) * x.ln() - ln_gamma(a);
    }
    acc + ln_gamma(total_alpha)
}

/// How much global mass to reserve for communities not present in a log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum UnseenMass {
    /// `gamma / (gamma + total action count)`.
    Crp,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaEstimate {
    pub smoothing: f64,
    pub gamma: f64,
    pub unseen: UnseenMass,
}

impl Default for BetaEstimate {
    fn default() -> Self {
        Self {
            smoothing: 0.5,
            gamma: 1.0,
            unseen: UnseenMass::Crp,
        }
    }
}

/// Smoothed corpus frequencies. Communities are ordered lexicographically.
pub fn estimate_beta(log: &EventLog, cfg: &BetaEstimate) -> Result<GlobalPopularity> {
    if log.is_empty() {
        return Err(Error::InvalidInput(
            "cannot estimate popularity from an empty log".into(),
        ));
    }
    if !(cfg.smoothing >= 0.0 && cfg.smoothing.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "smoothing must be nonnegative, got {}",
            cfg.smoothing
        )));
    }
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for rec in log.records() {
        *counts.entry(rec.community.as_str()).or_default() += 1;
    }
    let n = log.len() as f64;
    let unseen = match cfg.unseen {
        UnseenMass::Crp => cfg.gamma / (cfg.gamma + n),
        UnseenMass::Fixed(x) => x,
    };
    if !(0.0..1.0).contains(&unseen) {
        return Err(Error::InvalidArgument(format!(
            "unseen mass must lie in [0, 1), got {unseen}"
        )));
    }
    let weights: Vec<f64> = counts.values().map(|&c| c as f64 + cfg.smoothing).collect();
    let total: f64 = weights.iter().sum();
    let beta = weights.iter().map(|w| (1.0 - unseen) * w / total).collect();
    GlobalPopularity::new(
        counts.keys().map(|c| c.to_string()).collect(),
        beta,
        unseen,
        cfg.gamma,
    )
}
