use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use proplab_core::evaluation::{
    training_fraction_sweep, Baseline, BaselineKind, FullModel, Predictor, SweepConfig,
};
use proplab_core::events::{generate_synthetic_log, ActionCount, EventLog};
use proplab_core::hdp::{stick_breaking, HdpParams};
use proplab_core::inference::{fit, FitConfig};
use proplab_core::model::{FeedbackModel, ReplyNormalizer};
use proplab_core::simulation::{run_many, SimConfig};
use proplab_core::{Execution, LearningParams, ModelParams, RewardFunction};

fn strategies() -> Vec<(&'static str, Execution)> {
    let mut v = vec![("sequential", Execution::Sequential)];
    #[cfg(feature = "parallel")]
    v.push(("parallel", Execution::Parallel));
    v
}

fn corpus() -> (ModelParams, EventLog) {
    let params = ModelParams {
        hdp: HdpParams {
            alpha0: 2.0,
            popularity: stick_breaking(5.0, 20, 1).unwrap(),
        },
        learning: LearningParams::new(0.1, 0.2).unwrap(),
        reward: RewardFunction::linear(1.0, 0.5, 0.0),
    };
    let log = generate_synthetic_log(&params, 400, ActionCount::Fixed(100), &FeedbackModel::default(), 3).unwrap();
    (params, log)
}

fn bench_fit(c: &mut Criterion) {
    let (_, log) = corpus();
    let mut g = c.benchmark_group("fit_20_iterations");
    g.sample_size(10);
    for (name, exec) in strategies() {
        let cfg = FitConfig {
            n_samples: 20,
            burn_in: 10,
            reply_cap: Some(5.0),
            execution: exec,
            ..FitConfig::default()
        };
        g.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| b.iter(|| fit(&log, cfg).unwrap()));
    }
    g.finish();
}

fn bench_simulation(c: &mut Criterion) {
    let cfg = SimConfig::default();
    let mut g = c.benchmark_group("run_many_20");
    g.sample_size(10);
    for (name, exec) in strategies() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, exec| {
            b.iter(|| run_many(&cfg, 20, *exec).unwrap())
        });
    }
    g.finish();
}

fn bench_sweep(c: &mut Criterion) {
    let (params, log) = corpus();
    let mut g = c.benchmark_group("sweep_two_fractions");
    g.sample_size(10);
    for (name, exec) in strategies() {
        let full = FullModel {
            params: params.clone(),
            normalizer: ReplyNormalizer::new(5.0).unwrap(),
            q0_iterations: 100,
            execution: exec,
        };
        let initial = Baseline::new(BaselineKind::Initial, 10, Some(params.hdp.clone())).unwrap();
        let cfg = SweepConfig {
            execution: exec,
            ..SweepConfig::default()
        };
        let predictors: [&dyn Predictor; 2] = [&full, &initial];
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| training_fraction_sweep(&log, &[0.5, 1.0], &predictors, &cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_fit, bench_simulation, bench_sweep);
criterion_main!(benches);
