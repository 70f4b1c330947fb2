use std::collections::BTreeMap;

use approx::assert_abs_diff_eq;
use proplab_core::events::{generate_synthetic_log, ActionCount, EventLog};
use proplab_core::hdp::{GlobalPopularity, HdpParams};
use proplab_core::inference::{
    fit, log_posterior, Blocks, FitConfig, LikelihoodOptions, Prior, Priors, Q0Treatment,
};
use proplab_core::model::{FeedbackModel, LearningParams, ReplyNormalizer, RewardFunction};
use proplab_core::params::ModelParams;
use proplab_core::Execution;

fn model(phi: f64, eps: f64, w: (f64, f64, f64)) -> ModelParams {
    ModelParams {
        hdp: HdpParams {
            alpha0: 2.0,
            popularity: GlobalPopularity::new(
                vec!["a".into(), "b".into(), "c".into()],
                vec![0.5, 0.3, 0.15],
                0.05,
                1.0,
            )
            .unwrap(),
        },
        learning: LearningParams::new(phi, eps).unwrap(),
        reward: RewardFunction::linear(w.0, w.1, w.2),
    }
}

fn small_log(seed: u64, users: usize, actions: usize) -> EventLog {
    let mut p = model(0.2, 0.3, (1.0, 0.2, 0.0));
    // keep the synthetic log inside the known communities
    p.hdp.popularity = GlobalPopularity::new(p.hdp.popularity.communities.clone(), vec![0.5, 0.3, 0.2], 0.0, 1.0)
        .unwrap();
    generate_synthetic_log(&p, users, ActionCount::Fixed(actions), &FeedbackModel::default(), seed).unwrap()
}

#[test]
fn log_posterior_is_additive_over_users() {
    let log = small_log(1, 2, 15);
    let users = log.users();
    let one = EventLog::from_users(&users[..1]);
    let two = EventLog::from_users(&users[1..]);
    let p = model(0.2, 0.3, (1.0, 0.2, 0.0));
    let priors = Priors::default();
    let norm = ReplyNormalizer::new(5.0).unwrap();
    let opts = LikelihoodOptions::default();
    let q0s: BTreeMap<String, Vec<f64>> = users
        .iter()
        .map(|u| (u.user.clone(), vec![0.4, 0.3, 0.2, 0.1]))
        .collect();
    let joint = log_posterior(&p, &log, &q0s, &priors, &norm, &opts).unwrap();
    let a = log_posterior(&p, &one, &q0s, &priors, &norm, &opts).unwrap();
    let b = log_posterior(&p, &two, &q0s, &priors, &norm, &opts).unwrap();
    let prior = priors.ln_pdf(&p);
    assert_abs_diff_eq!(joint, a + b - prior, epsilon = 1e-9);
    assert!(a <= prior + 1e-12 || a.is_finite());
}

fn quick_config(seed: u64) -> FitConfig {
    FitConfig {
        n_samples: 120,
        burn_in: 60,
        rng_seed: seed,
        reply_cap: Some(5.0),
        ..FitConfig::default()
    }
}

#[test]
fn fit_is_seed_deterministic_and_execution_independent() {
    let log = small_log(2, 12, 30);
    let a = fit(&log, &quick_config(4)).unwrap();
    let b = fit(&log, &quick_config(4)).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    let mut seq = quick_config(4);
    seq.execution = Execution::Sequential;
    let c = fit(&log, &seq).unwrap();
    assert_eq!(a.to_json().unwrap(), c.to_json().unwrap());
    let other = fit(&log, &quick_config(5)).unwrap();
    assert_ne!(a.posterior_samples, other.posterior_samples);
}

#[test]
fn map_attains_maximum_and_beats_initialization() {
    let log = small_log(3, 10, 25);
    for treatment in [Q0Treatment::MapPointEstimate, Q0Treatment::SampleLatent] {
        let cfg = FitConfig {
            q0_treatment: treatment,
            ..quick_config(8)
        };
        let res = fit(&log, &cfg).unwrap();
        let best = res
            .posterior_samples
            .iter()
            .map(|s| s.log_posterior)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(res.map_log_posterior >= best);
        assert!(res.map_log_posterior >= res.diagnostics.initial_log_posterior);
    }
}

#[test]
fn one_retained_sample_when_burn_in_is_one_less() {
    let log = small_log(4, 3, 10);
    let cfg = FitConfig {
        n_samples: 11,
        burn_in: 10,
        ..quick_config(1)
    };
    let res = fit(&log, &cfg).unwrap();
    assert_eq!(res.posterior_samples.len(), 1);
    assert_eq!(res.diagnostics.retained, 1);
}

#[test]
fn invalid_configs_are_rejected() {
    let log = small_log(4, 3, 10);
    let cfg = FitConfig {
        n_samples: 10,
        burn_in: 10,
        ..quick_config(1)
    };
    assert!(fit(&log, &cfg).is_err());
    assert!(fit(&EventLog::default(), &quick_config(1)).is_err());
}

#[test]
fn fit_result_round_trips_through_json() {
    let log = small_log(6, 4, 12);
    let res = fit(&log, &quick_config(2)).unwrap();
    let text = res.to_json().unwrap();
    let back = proplab_core::inference::FitResult::from_json(&text).unwrap();
    assert_eq!(back.to_json().unwrap(), text);
}

#[test]
fn unidentified_exploration_reproduces_its_prior() {
    // zero reward and no learning signal: the likelihood is flat in (phi, eps)
    let log = small_log(7, 20, 15);
    let mut cfg = FitConfig {
        n_samples: 24_000,
        burn_in: 4_000,
        rng_seed: 3,
        reply_cap: Some(5.0),
        blocks: Blocks {
            learning: true,
            reward: false,
            alpha0: false,
        },
        q0_treatment: Q0Treatment::Fixed(BTreeMap::new()),
        ..FitConfig::default()
    };
    cfg.init.w_replies = 0.0;
    cfg.init.w_votes = 0.0;
    cfg.init.w_intercept = 0.0;
    cfg.priors.epsilon = Prior::Uniform { lo: 0.0, hi: 1.0 };
    let res = fit(&log, &cfg).unwrap();
    let eps: Vec<f64> = res.posterior_samples.iter().map(|s| s.epsilon).collect();
    let n = eps.len() as f64;
    let mean = eps.iter().sum::<f64>() / n;
    assert!((mean - 0.5).abs() < 0.05, "mean {mean}");
    let mut bins = [0usize; 5];
    for e in &eps {
        bins[((e * 5.0) as usize).min(4)] += 1;
    }
    for b in bins {
        let share = b as f64 / n;
        assert!((share - 0.2).abs() < 0.05, "bins {bins:?}");
    }
}

