use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{EventLog, UserSequence};
use crate::exec::Execution;
use crate::hdp::dirichlet_ln_pdf_logratio;
use crate::model::{
    CommunityId, FeedbackVector, LearningParams, PropensityState, ReplyNormalizer, RewardFunction,
};
use crate::params::ModelParams;

use super::priors::Priors;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodOptions {
    /// Added to every choice probability before taking logs.
    pub prob_floor: f64,
}

impl Default for LikelihoodOptions {
    fn default() -> Self {
        Self { prob_floor: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservedAction {
    pub community: CommunityId,
    pub features: FeedbackVector,
}

impl ObservedAction {
    pub fn new(community: impl Into<CommunityId>, features: FeedbackVector) -> Self {
        Self {
            community: community.into(),
            features,
        }
    }
}

pub fn observed_actions(user: &UserSequence, normalizer: &ReplyNormalizer) -> Vec<ObservedAction> {
    user.actions
        .iter()
        .map(|a| ObservedAction::new(a.community.clone(), normalizer.normalize(a.feedback)))
        .collect()
}

/// Log probability of an observed action sequence, replaying the propensity
/// updates with the observed rewards.
///
/// `q0` covers the communities of `params.hdp.popularity` plus the unseen
/// slot. A community outside that index is charged the unseen-slot
/// probability on first occurrence and then gets its own slot.
pub fn sequence_log_likelihood(
    params: &ModelParams,
    q0: &[f64],
    actions: &[ObservedAction],
    opts: &LikelihoodOptions,
) -> Result<f64> {
    let mut state = PropensityState::new(params.hdp.popularity.communities.clone(), q0.to_vec())?;
    let mut total = 0.0;
    for a in actions {
        let mass: f64 = state.q().iter().sum();
        let slot = state.slot_of(&a.community);
        let charged = slot.unwrap_or(state.unseen_slot());
        let p = if mass > 0.0 {
            state.q()[charged] / mass + opts.prob_floor
        } else {
            0.0
        };
        if !(p > 0.0) {
            return Ok(f64::NEG_INFINITY);
        }
        total += p.ln();
        let slot = match slot {
            Some(s) => s,
            None => state.grow_in_place(&a.community, 0.5)?,
        };
        let reward = params.reward.reward(&a.features)?;
        state.update_in_place(slot, reward, &params.learning)?;
    }
    Ok(total)
}

/// Sum over users of the sequence log-likelihood and the log-ratio
/// Dirichlet density of their initial propensities, plus the parameter priors.
pub fn log_posterior(
    params: &ModelParams,
    log: &EventLog,
    q0s: &BTreeMap<String, Vec<f64>>,
    priors: &Priors,
    normalizer: &ReplyNormalizer,
    opts: &LikelihoodOptions,
) -> Result<f64> {
    params.validate()?;
    let users = log.users();
    let alpha = params.dirichlet_alpha();
    let terms = Execution::default().map(&users, |u| -> Result<f64> {
        let q0 = q0s.get(&u.user).ok_or_else(|| {
            Error::InvalidInput(format!("no initial propensities for user {:?}", u.user))
        })?;
        let ll = sequence_log_likelihood(params, q0, &observed_actions(u, normalizer), opts)?;
        Ok(ll + dirichlet_ln_pdf_logratio(q0, &alpha))
    });
    let mut total = priors.ln_pdf(params);
    for t in terms {
        total += t?;
    }
    Ok(total)
}

/// One user's actions mapped onto a fixed community index, with feedback
/// features precomputed.
#[derive(Clone, Debug)]
pub(crate) struct PreparedUser {
    pub user: String,
    /// Global slot of each action.
    pub global: Vec<u32>,
    /// Slot of each action within the user's own visited set.
    pub local: Vec<u32>,
    /// Global slot of each visited-set slot, in order of first visit.
    pub visited: Vec<u32>,
    n_local: usize,
    features: Vec<FeedbackVector>,
}

/// Per-action decomposition of the propensity state.
///
/// Because every update is affine in `q0` and `sum(q0) = 1`, the propensity
/// of the chosen slot before action `i` is `coeff[i] * q0[slot] + offset[i]`
/// and the total mass is `denom[i]`, independent of `q0`.
#[derive(Clone, Debug, Default)]
pub(crate) struct Trace {
    pub coeff: Vec<f64>,
    pub offset: Vec<f64>,
    pub denom: Vec<f64>,
}

impl PreparedUser {
    pub fn new(user: &str, actions: &[ObservedAction], index: &HashMap<&str, u32>) -> Result<Self> {
        let mut global = Vec::with_capacity(actions.len());
        let mut local = Vec::with_capacity(actions.len());
        let mut local_of: HashMap<u32, u32> = HashMap::new();
        let mut visited = Vec::new();
        let mut features = Vec::with_capacity(actions.len());
        for a in actions {
            let g = *index.get(a.community.as_str()).ok_or_else(|| {
                Error::InvalidInput(format!("community {:?} is not indexed", a.community))
            })?;
            a.features.validate()?;
            let next = local_of.len() as u32;
            let l = *local_of.entry(g).or_insert_with(|| {
                visited.push(g);
                next
            });
            local.push(l);
            global.push(g);
            features.push(a.features);
        }
        Ok(Self {
            user: user.to_string(),
            global,
            local,
            visited,
            n_local: local_of.len(),
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.global.len()
    }

    /// Collapses a vector over all slots to the visited slots plus one
    /// remainder slot. Dirichlet vectors aggregate exactly this way, and the
    /// likelihood only reads visited slots.
    pub fn compact(&self, full: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = self.visited.iter().map(|g| full[*g as usize]).collect();
        let total: f64 = full.iter().sum();
        let rest = (total - out.iter().sum::<f64>()).max(0.0);
        let all_visited = self.visited.len() == full.len();
        out.push(if all_visited { 0.0 } else { rest });
        out
    }

    /// Inverse of [`Self::compact`]: the remainder is spread over unvisited
    /// slots in proportion to `base`.
    pub fn expand(&self, compact: &[f64], base: &[f64]) -> Vec<f64> {
        let n = self.visited.len();
        let mut out = base.to_vec();
        let mut base_rest: f64 = base.iter().sum();
        for g in &self.visited {
            base_rest -= base[*g as usize];
        }
        let scale = if base_rest > 0.0 { compact[n] / base_rest } else { 0.0 };
        for x in out.iter_mut() {
            *x *= scale;
        }
        for (j, g) in self.visited.iter().enumerate() {
            out[*g as usize] = compact[j];
        }
        out
    }

    pub fn trace(&self, learning: &LearningParams, reward: &RewardFunction) -> Trace {
        let n = self.len();
        let mut t = Trace {
            coeff: Vec::with_capacity(n),
            offset: Vec::with_capacity(n),
            denom: Vec::with_capacity(n),
        };
        let keep = 1.0 - learning.phi;
        let mut coeff = 1.0;
        // offsets are stored divided by a running decay factor so that the
        // per-step decay is O(1)
        let mut scale = 1.0;
        let mut stored = vec![0.0; self.n_local];
        let mut offset_total = 0.0;
        for (s, f) in self.local.iter().zip(&self.features) {
            let s = *s as usize;
            t.coeff.push(coeff);
            t.offset.push(scale * stored[s]);
            t.denom.push(coeff + offset_total);
            let r = reward.eval(f);
            coeff *= keep;
            offset_total *= keep;
            scale *= keep;
            if scale == 0.0 {
                stored.fill(0.0);
                scale = 1.0;
            } else if scale < 1e-150 {
                for x in stored.iter_mut() {
                    *x *= scale;
                }
                scale = 1.0;
            }
            let direct = (1.0 - learning.epsilon) * r;
            stored[s] += direct / scale;
            offset_total += direct;
            coeff += learning.epsilon * r;
        }
        t
    }
}

impl Trace {
    pub fn log_likelihood(&self, q0: &[f64], global: &[u32], prob_floor: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..global.len() {
            let d = self.denom[i];
            let p = if d > 0.0 {
                (self.coeff[i] * q0[global[i] as usize] + self.offset[i]) / d + prob_floor
            } else {
                0.0
            };
            if !(p > 0.0) {
                return f64::NEG_INFINITY;
            }
            total += p.ln();
        }
        total
    }
}

/// An event log indexed against a fixed community list.
#[derive(Clone, Debug)]
pub(crate) struct PreparedLog {
    pub users: Vec<PreparedUser>,
}

impl PreparedLog {
    pub fn new(log: &EventLog, communities: &[CommunityId], normalizer: &ReplyNormalizer) -> Result<Self> {
        let index: HashMap<&str, u32> = communities
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i as u32))
            .collect();
        let users = log
            .users()
            .iter()
            .map(|u| PreparedUser::new(&u.user, &observed_actions(u, normalizer), &index))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { users })
    }

    pub fn n_actions(&self) -> usize {
        self.users.iter().map(|u| u.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hdp::{GlobalPopularity, HdpParams};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(communities: &[&str], phi: f64, eps: f64, reward: RewardFunction) -> ModelParams {
        let k = communities.len();
        ModelParams {
            hdp: HdpParams {
                alpha0: 1.0,
                popularity: GlobalPopularity::new(
                    communities.iter().map(|c| c.to_string()).collect(),
                    vec![1.0 / k as f64; k],
                    0.0,
                    1.0,
                )
                .unwrap(),
            },
            learning: LearningParams::new(phi, eps).unwrap(),
            reward,
        }
    }

    fn obs(c: &str) -> ObservedAction {
        ObservedAction::new(c, FeedbackVector::new(0.0, 0.0).unwrap())
    }

    #[test]
    fn iid_case() {
        let p = params(&["A", "B"], 0.0, 0.3, RewardFunction::default());
        let ll = sequence_log_likelihood(&p, &[0.5, 0.5, 0.0], &[obs("A"), obs("B")], &Default::default())
            .unwrap();
        assert_abs_diff_eq!(ll, 2.0 * 0.5f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(ll, -1.3863, epsilon = 1e-4);
    }

    #[test]
    fn empty_sequence() {
        let p = params(&["A", "B"], 0.4, 0.3, RewardFunction::linear(1.0, 1.0, 1.0));
        let ll = sequence_log_likelihood(&p, &[0.5, 0.5, 0.0], &[], &Default::default()).unwrap();
        assert_eq!(ll, 0.0);
    }

    #[test]
    fn hand_forward_pass() {
        let p = params(&["A", "B"], 0.0, 0.0, RewardFunction::linear(0.0, 0.0, 1.0));
        let ll = sequence_log_likelihood(&p, &[0.5, 0.5, 0.0], &[obs("A"), obs("A")], &Default::default())
            .unwrap();
        assert_abs_diff_eq!(ll, 0.375f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(ll, -0.98083, epsilon = 1e-5);
    }

    #[test]
    fn unseen_community_is_charged_then_indexed() {
        // q0 = [A: 0.8, unseen: 0.2]; Z first costs 0.2, then takes half the
        // unseen mass and collects the reward
        let p = params(&["A"], 0.0, 0.0, RewardFunction::linear(0.0, 0.0, 1.0));
        let ll = sequence_log_likelihood(&p, &[0.8, 0.2], &[obs("Z"), obs("Z")], &Default::default())
            .unwrap();
        let expect = 0.2f64.ln() + (1.1f64 / 2.0).ln();
        assert_abs_diff_eq!(ll, expect, epsilon = 1e-12);
    }

    #[test]
    fn zero_probability_is_negative_infinity() {
        let p = params(&["A", "B"], 0.0, 0.0, RewardFunction::default());
        let ll = sequence_log_likelihood(&p, &[1.0, 0.0, 0.0], &[obs("B")], &Default::default()).unwrap();
        assert_eq!(ll, f64::NEG_INFINITY);
        let floored = sequence_log_likelihood(
            &p,
            &[1.0, 0.0, 0.0],
            &[obs("B")],
            &LikelihoodOptions { prob_floor: 1e-12 },
        )
        .unwrap();
        assert_abs_diff_eq!(floored, 1e-12f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn trace_matches_state_replay() {
        let names: Vec<String> = (0..6).map(|i| format!("c{i}")).collect();
        let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        let index: HashMap<&str, u32> = refs.iter().enumerate().map(|(i, c)| (*c, i as u32)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..50 {
            let phi = if case == 0 { 1.0 } else { rng.random::<f64>() };
            let eps = rng.random::<f64>();
            let rf = RewardFunction::linear(rng.random::<f64>() * 2.0, rng.random::<f64>() - 0.3, 0.1);
            let p = params(&refs, phi, eps, rf);
            let mut q0: Vec<f64> = (0..7).map(|_| rng.random::<f64>() + 0.01).collect();
            let s: f64 = q0.iter().sum();
            q0.iter_mut().for_each(|x| *x /= s);
            let acts: Vec<ObservedAction> = (0..200)
                .map(|_| {
                    ObservedAction::new(
                        names[rng.random_range(0..3)].clone(),
                        FeedbackVector::new(rng.random::<f64>(), rng.random_range(-3..6) as f64).unwrap(),
                    )
                })
                .collect();
            let direct = sequence_log_likelihood(&p, &q0, &acts, &Default::default()).unwrap();
            let prepared = PreparedUser::new("u", &acts, &index).unwrap();
            let fast = prepared
                .trace(&p.learning, &p.reward)
                .log_likelihood(&q0, &prepared.global, 0.0);
            if direct.is_finite() {
                assert_abs_diff_eq!(direct, fast, epsilon = 1e-9 * direct.abs().max(1.0));
            } else {
                assert_eq!(direct, fast);
            }
        }
    }

    #[test]
    fn trace_survives_long_sequences_with_fast_decay() {
        let index: HashMap<&str, u32> = [("A", 0), ("B", 1)].into_iter().collect();
        let acts: Vec<ObservedAction> = (0..5_000)
            .map(|i| obs(if i % 3 == 0 { "A" } else { "B" }))
            .map(|mut a| {
                a.features = FeedbackVector::new(1.0, 0.0).unwrap();
                a
            })
            .collect();
        let p = params(&["A", "B"], 0.6, 0.2, RewardFunction::linear(1.0, 0.0, 0.0));
        let prepared = PreparedUser::new("u", &acts, &index).unwrap();
        let fast = prepared
            .trace(&p.learning, &p.reward)
            .log_likelihood(&[0.3, 0.7, 0.0], &prepared.global, 0.0);
        let direct = sequence_log_likelihood(&p, &[0.3, 0.7, 0.0], &acts, &Default::default()).unwrap();
        assert!(fast.is_finite());
        assert_abs_diff_eq!(direct, fast, epsilon = 1e-8 * direct.abs());
    }

    #[test]
    fn prepared_user_rejects_unknown_community() {
        let index: HashMap<&str, u32> = [("A", 0)].into_iter().collect();
        assert!(PreparedUser::new("u", &[obs("B")], &index).is_err());
    }

    #[test]
    fn compact_and_expand_round_trip() {
        let index: HashMap<&str, u32> = [("a", 0), ("b", 1), ("c", 2), ("d", 3)].into_iter().collect();
        let acts = [obs("c"), obs("a"), obs("c")];
        let u = PreparedUser::new("u", &acts, &index).unwrap();
        let full = [0.1, 0.2, 0.3, 0.25, 0.15];
        let c = u.compact(&full);
        assert_eq!(c.len(), 3);
        assert_abs_diff_eq!(c.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let back = u.expand(&c, &full);
        for (x, y) in back.iter().zip(&full) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }
}
