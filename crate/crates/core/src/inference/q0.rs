use std::collections::HashMap;

use rand::Rng;

use crate::error::Result;
use statrs::function::gamma::ln_gamma;

use crate::hdp::{dirichlet_ln_pdf_logratio, sample_dirichlet};
use crate::params::ModelParams;

use super::likelihood::{
    sequence_log_likelihood, LikelihoodOptions, ObservedAction, PreparedUser, Trace,
};

/// Convergence threshold on the largest coordinate change of `q0`.
pub(crate) const Q0_TOL: f64 = 1e-10;

/// Sequence log-likelihood plus the log-ratio Dirichlet log density of `q0`.
pub fn q0_objective(actions: &[ObservedAction], params: &ModelParams, q0: &[f64]) -> Result<f64> {
    let ll = sequence_log_likelihood(params, q0, actions, &LikelihoodOptions::default())?;
    Ok(ll + dirichlet_ln_pdf_logratio(q0, &params.dirichlet_alpha()))
}

/// Point estimate of a user's initial propensities.
///
/// Each choice probability is `(c q0[s] + d) / D` with `D` free of `q0`, so
/// the objective is a sum of logs of affine terms plus `sum_k alpha_k ln q0_k`.
/// The minorize-maximize step below (split each term into its `q0` part and
/// its learned part) increases the objective monotonically from the
/// Dirichlet-mean start.
///
/// Communities the parameters do not index are given temporary slots during
/// the optimization and folded back into the unseen slot afterwards.
pub fn estimate_q0_map(
    actions: &[ObservedAction],
    params: &ModelParams,
    iterations: usize,
) -> Result<Vec<f64>> {
    params.validate()?;
    let known = &params.hdp.popularity.communities;
    let mut index: HashMap<&str, u32> = known
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i as u32))
        .collect();
    let mut novel: Vec<&str> = Vec::new();
    for a in actions {
        if !index.contains_key(a.community.as_str()) && !novel.contains(&a.community.as_str()) {
            novel.push(a.community.as_str());
        }
    }
    let k = known.len();
    let alpha = params.dirichlet_alpha();
    if novel.is_empty() {
        let prepared = PreparedUser::new("", actions, &index)?;
        let trace = prepared.trace(&params.learning, &params.reward);
        let mut q0 = params.hdp.prior_mean();
        refine_q0(&trace, &prepared.global, &alpha, &mut q0, iterations, Q0_TOL);
        return Ok(q0);
    }
    // unseen slot moves to the end of the extended layout
    let mut ext_alpha: Vec<f64> = alpha[..k].to_vec();
    let unseen_alpha = alpha[k];
    let share = unseen_alpha / (novel.len() + 1) as f64;
    for (j, c) in novel.iter().enumerate() {
        index.insert(c, (k + j) as u32);
        ext_alpha.push(share);
    }
    ext_alpha.push(share);
    let prepared = PreparedUser::new("", actions, &index)?;
    let trace = prepared.trace(&params.learning, &params.reward);
    let mut ext = vec![0.0; ext_alpha.len()];
    ext[..k].copy_from_slice(&params.hdp.prior_mean()[..k]);
    let unseen_mean = params.hdp.popularity.beta_unseen / (novel.len() + 1) as f64;
    for x in ext[k..].iter_mut() {
        *x = unseen_mean;
    }
    refine_q0(&trace, &prepared.global, &ext_alpha, &mut ext, iterations, Q0_TOL);
    let mut q0 = ext[..k].to_vec();
    q0.push(ext[k..].iter().sum());
    Ok(q0)
}

/// Runs up to `max_iter` monotone MM steps in place; returns the number run.
pub(crate) fn refine_q0(
    trace: &Trace,
    global: &[u32],
    alpha: &[f64],
    q0: &mut [f64],
    max_iter: usize,
    tol: f64,
) -> usize {
    let mut mass = vec![0.0; q0.len()];
    for it in 0..max_iter {
        mass.copy_from_slice(alpha);
        for i in 0..global.len() {
            let g = global[i] as usize;
            let own = trace.coeff[i] * q0[g];
            let whole = own + trace.offset[i];
            mass[g] += if whole > 0.0 { own / whole } else { 1.0 };
        }
        let total: f64 = mass.iter().sum();
        let mut delta: f64 = 0.0;
        for (x, m) in q0.iter_mut().zip(&mass) {
            let next = m / total;
            delta = delta.max((next - *x).abs());
            *x = next;
        }
        if delta < tol {
            return it + 1;
        }
    }
    max_iter
}

/// Expected number of choices attributed to the initial-propensity part of
/// each slot, written into `counts`.
pub(crate) fn attribution_counts(trace: &Trace, global: &[u32], q0: &[f64], counts: &mut Vec<f64>) {
    counts.clear();
    counts.resize(q0.len(), 0.0);
    for i in 0..global.len() {
        let g = global[i] as usize;
        let own = trace.coeff[i] * q0[g];
        let whole = own + trace.offset[i];
        counts[g] += if whole > 0.0 { own / whole } else { 1.0 };
    }
}

/// Data augmentation for `q0`: attributes each choice to the
/// initial-propensity part of its probability (with that part's share) or
/// to the learned part, and writes the per-slot attribution counts.
pub(crate) fn sample_attribution<R: Rng + ?Sized>(
    trace: &Trace,
    global: &[u32],
    q0: &[f64],
    counts: &mut Vec<f64>,
    rng: &mut R,
) {
    counts.clear();
    counts.resize(q0.len(), 0.0);
    for i in 0..global.len() {
        let g = global[i] as usize;
        let own = trace.coeff[i] * q0[g];
        let whole = own + trace.offset[i];
        let r = if whole > 0.0 { own / whole } else { 1.0 };
        if rng.random::<f64>() < r {
            counts[g] += 1.0;
        }
    }
}

/// Conjugate draw of `q0` given attribution counts.
pub(crate) fn sample_q0_given_counts<R: Rng + ?Sized>(
    alpha: &[f64],
    counts: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    let conc: Vec<f64> = alpha.iter().zip(counts).map(|(a, m)| a + m).collect();
    // entries far below the smallest positive double are stored as that
    // double; the likelihood cannot tell the difference
    let mut draw = sample_dirichlet(&conc, rng)?;
    for (x, a) in draw.iter_mut().zip(&conc) {
        if *a > 0.0 && *x < f64::MIN_POSITIVE {
            *x = f64::MIN_POSITIVE;
        }
    }
    Ok(draw)
}

/// `ln B(alpha + m) - ln B(alpha)`: the probability of attribution counts `m`
/// with `q0 ~ Dirichlet(alpha)` integrated out. Real-valued counts allowed.
pub(crate) fn dirichlet_multinomial_ln(alpha: &[f64], counts: &[f64]) -> f64 {
    let mut acc = 0.0;
    let mut total_alpha = 0.0;
    let mut total_m = 0.0;
    for (&a, &m) in alpha.iter().zip(counts) {
        total_alpha += a;
        if m > 0.0 {
            if a == 0.0 {
                return f64::NEG_INFINITY;
            }
            total_m += m;
            acc += ln_gamma(a + m) - ln_gamma(a);
        }
    }
    acc + ln_gamma(total_alpha) - ln_gamma(total_alpha + total_m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hdp::{GlobalPopularity, HdpParams};
    use crate::model::{FeedbackVector, LearningParams, RewardFunction};
    use approx::assert_abs_diff_eq;

    fn params(beta: Vec<f64>, unseen: f64, alpha0: f64, phi: f64, eps: f64, w: f64) -> ModelParams {
        let k = beta.len();
        ModelParams {
            hdp: HdpParams {
                alpha0,
                popularity: GlobalPopularity::new(
                    (0..k).map(|i| format!("c{i}")).collect(),
                    beta,
                    unseen,
                    1.0,
                )
                .unwrap(),
            },
            learning: LearningParams::new(phi, eps).unwrap(),
            reward: RewardFunction::linear(w, 0.0, 0.0),
        }
    }

    fn acts(seq: &[usize]) -> Vec<ObservedAction> {
        seq.iter()
            .enumerate()
            .map(|(i, c)| {
                ObservedAction::new(
                    format!("c{c}"),
                    FeedbackVector::new((i % 3) as f64 / 2.0, 0.0).unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn no_actions_returns_prior_mean() {
        let p = params(vec![0.5, 0.3], 0.2, 2.0, 0.1, 0.2, 1.0);
        let q0 = estimate_q0_map(&[], &p, 100).unwrap();
        for (a, b) in q0.iter().zip(&[0.5, 0.3, 0.2]) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn strong_prior_dominates() {
        let p = params(vec![0.6, 0.4], 0.0, 1e9, 0.0, 0.5, 0.0);
        let q0 = estimate_q0_map(&acts(&[1, 1, 1, 1, 1, 1]), &p, 500).unwrap();
        assert_abs_diff_eq!(q0[0], 0.6, epsilon = 1e-6);
    }

    #[test]
    fn improves_on_initializer() {
        let p = params(vec![0.4, 0.35, 0.2], 0.05, 1.5, 0.2, 0.3, 1.0);
        let a = acts(&[2, 2, 0, 2, 1, 2, 2, 0, 2, 2]);
        let start = q0_objective(&a, &p, &p.hdp.prior_mean()).unwrap();
        let q0 = estimate_q0_map(&a, &p, 200).unwrap();
        assert_abs_diff_eq!(q0.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(q0_objective(&a, &p, &q0).unwrap() >= start);
    }

    #[test]
    fn matches_grid_search_on_two_communities() {
        // K = 2 with zero unseen mass, so q0 lives on the 1-simplex
        let p = params(vec![0.5, 0.5], 0.0, 3.0, 0.15, 0.25, 1.0);
        let a = acts(&[0, 1, 1, 0, 1, 1, 1, 0, 1, 1]);
        let estimate = estimate_q0_map(&a, &p, 2_000).unwrap();
        let grid_best = (1..10_000)
            .map(|i| i as f64 / 10_000.0)
            .max_by(|x, y| {
                let fx = grid_objective(&a, &p, *x);
                let fy = grid_objective(&a, &p, *y);
                fx.partial_cmp(&fy).unwrap()
            })
            .unwrap();
        assert!((estimate[0] - grid_best).abs() < 0.01, "{} vs {grid_best}", estimate[0]);
    }

    // Independent objective: plain replay with explicit vectors.
    fn grid_objective(a: &[ObservedAction], p: &ModelParams, x: f64) -> f64 {
        let q0 = [x, 1.0 - x];
        let mut q = q0;
        let mut ll = 0.0;
        for act in a {
            let s: usize = act.community[1..].parse().unwrap();
            ll += (q[s] / (q[0] + q[1])).ln();
            let r = p.reward.eval(&act.features);
            for j in 0..2 {
                q[j] *= 1.0 - p.learning.phi;
            }
            q[s] += (1.0 - p.learning.epsilon) * r;
            for j in 0..2 {
                q[j] += p.learning.epsilon * r * q0[j];
            }
        }
        let alpha = [p.hdp.alpha0 * 0.5, p.hdp.alpha0 * 0.5];
        ll + alpha[0] * q0[0].ln() + alpha[1] * q0[1].ln()
    }

    #[test]
    fn novel_communities_fold_into_unseen() {
        let p = params(vec![0.5, 0.4], 0.1, 2.0, 0.1, 0.2, 1.0);
        let mut a = acts(&[0, 0, 1]);
        a.push(ObservedAction::new("elsewhere", FeedbackVector::new(0.0, 0.0).unwrap()));
        let q0 = estimate_q0_map(&a, &p, 200).unwrap();
        assert_eq!(q0.len(), 3);
        assert_abs_diff_eq!(q0.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(q0[2] > 0.1);
    }

    #[test]
    fn dirichlet_multinomial_matches_integer_formula() {
        // one draw into slot 0 under Dirichlet(1, 1): probability 1/2
        assert_abs_diff_eq!(
            dirichlet_multinomial_ln(&[1.0, 1.0], &[1.0, 0.0]),
            0.5f64.ln(),
            epsilon = 1e-12
        );
        // two draws into slot 0 under Dirichlet(1, 2): 1/3 * 2/4
        assert_abs_diff_eq!(
            dirichlet_multinomial_ln(&[1.0, 2.0], &[2.0, 0.0]),
            (1.0f64 / 6.0).ln(),
            epsilon = 1e-12
        );
        assert_eq!(dirichlet_multinomial_ln(&[1.0, 2.0], &[0.0, 0.0]), 0.0);
        assert_eq!(dirichlet_multinomial_ln(&[0.0, 2.0], &[1.0, 0.0]), f64::NEG_INFINITY);
    }
}
