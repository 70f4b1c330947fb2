use proplab_core::events::{generate_synthetic_log, ActionCount};
use proplab_core::hdp::{GlobalPopularity, HdpParams};
use proplab_core::model::{
    sample_trajectory, FeedbackModel, FeedbackSource, FeedbackVector, LearningParams, Observation,
    RawFeedback, RewardFunction,
};
use proplab_core::params::ModelParams;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Constant features and no randomness, so reward is `w_intercept`.
struct Constant;

impl FeedbackSource for Constant {
    fn draw(&mut self, _community: &str, _rng: &mut dyn RngCore) -> Observation {
        Observation {
            raw: RawFeedback { replies: 0, score: 0 },
            features: FeedbackVector::new(0.0, 0.0).unwrap(),
        }
    }
}

fn params(beta: Vec<f64>, unseen: f64, phi: f64, eps: f64, reward: RewardFunction) -> ModelParams {
    let k = beta.len();
    ModelParams {
        hdp: HdpParams {
            alpha0: 1.0,
            popularity: GlobalPopularity::new(
                (0..k).map(|i| format!("c{i}")).collect(),
                beta,
                unseen,
                1.0,
            )
            .unwrap(),
        },
        learning: LearningParams::new(phi, eps).unwrap(),
        reward,
    }
}

#[test]
fn zero_length_trajectory_is_empty() {
    let p = params(vec![0.5, 0.5], 0.0, 0.1, 0.1, RewardFunction::linear(1.0, 0.0, 0.0));
    let out = sample_trajectory(&p, &[0.5, 0.5, 0.0], 0, &mut FeedbackModel::default(), 1).unwrap();
    assert!(out.is_empty());
}

#[test]
fn single_community_is_always_chosen() {
    let p = params(vec![1.0], 0.0, 0.3, 0.4, RewardFunction::linear(1.0, 0.2, 0.0));
    let out = sample_trajectory(&p, &[1.0, 0.0], 300, &mut FeedbackModel::default(), 3).unwrap();
    assert_eq!(out.len(), 300);
    assert!(out.iter().all(|d| d.community == "c0"));
}

#[test]
fn polya_urn_matches_independent_simulator() {
    let p = params(vec![0.5, 0.5], 0.0, 0.0, 0.0, RewardFunction::linear(0.0, 0.0, 1.0));
    let n = 400;
    let mut final_shares = Vec::new();
    for seed in 0..300u64 {
        let out = sample_trajectory(&p, &[0.5, 0.5, 0.0], n, &mut Constant, seed).unwrap();
        // twin: plain urn with one uniform per draw
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q = [0.5f64, 0.5];
        let mut twin = Vec::new();
        for _ in 0..n {
            let u = rng.random::<f64>() * (q[0] + q[1]);
            let s = if u < q[0] { 0 } else { 1 };
            q[s] += 1.0;
            twin.push(format!("c{s}"));
        }
        let got: Vec<String> = out.iter().map(|d| d.community.clone()).collect();
        assert_eq!(got, twin, "seed {seed}");
        final_shares.push(got.iter().filter(|c| *c == "c0").count() as f64 / n as f64);
    }
    // the urn's limiting share is Beta(1/2, 1/2): mean 1/2, variance 1/8
    let m = final_shares.len() as f64;
    let mean = final_shares.iter().sum::<f64>() / m;
    let var = final_shares.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
    assert!((mean - 0.5).abs() < 0.07, "mean {mean}");
    assert!((var - 0.125).abs() < 0.03, "variance {var}");
}

#[test]
fn first_actions_follow_global_popularity() {
    // q0 ~ Dirichlet(alpha0 beta) and the first choice ~ q0, so first choices
    // are marginally distributed as beta (unseen draws become novel names)
    let beta = vec![0.4, 0.3, 0.15, 0.1];
    let p = params(beta.clone(), 0.05, 0.2, 0.3, RewardFunction::linear(1.0, 0.1, 0.0));
    let n_users = 20_000;
    let log = generate_synthetic_log(&p, n_users, ActionCount::Fixed(3), &FeedbackModel::default(), 11)
        .unwrap();
    let mut counts = [0usize; 5];
    for u in log.users() {
        let c = &u.actions[0].community;
        let slot = c.strip_prefix('c').and_then(|s| s.parse::<usize>().ok()).unwrap_or(4);
        counts[slot] += 1;
    }
    let expected: Vec<f64> = beta.iter().chain(std::iter::once(&0.05)).map(|b| b * n_users as f64).collect();
    let chi2: f64 = counts
        .iter()
        .zip(&expected)
        .map(|(o, e)| (*o as f64 - e).powi(2) / e)
        .sum();
    // 99.9% quantile of chi-square with 4 degrees of freedom
    assert!(chi2 < 18.47, "chi2 {chi2}, counts {counts:?}");
}

#[test]
fn synthetic_logs_are_seed_deterministic() {
    let p = params(vec![0.5, 0.3], 0.2, 0.1, 0.2, RewardFunction::linear(1.0, 0.5, 0.0));
    let a = generate_synthetic_log(&p, 50, ActionCount::Poisson(20.0), &FeedbackModel::default(), 5).unwrap();
    let b = generate_synthetic_log(&p, 50, ActionCount::Poisson(20.0), &FeedbackModel::default(), 5).unwrap();
    let c = generate_synthetic_log(&p, 50, ActionCount::Poisson(20.0), &FeedbackModel::default(), 6).unwrap();
    assert_eq!(a.to_jsonl_bytes(), b.to_jsonl_bytes());
    assert_ne!(a.to_jsonl_bytes(), c.to_jsonl_bytes());
}
