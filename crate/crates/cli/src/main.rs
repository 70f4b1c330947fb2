//! `proplab`: synthetic corpora, model fitting, evaluation and seeding
//! simulations from the command line. Every command that writes a file also
//! writes `<file>.manifest.json` describing how it was produced.

mod config;
mod manifest;
mod tables;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use proplab_core::events::{generate_synthetic_log, load_event_log, save_event_log, write_atomic, ActionCount};
use proplab_core::evaluation::{
    feedback_response_curve, predict_next, standard_predictors, training_fraction_sweep, training_log,
    FullModel, Predictor, SweepConfig, SweepResult,
};
use proplab_core::inference::{fit, FitConfig, FitResult, Q0Treatment};
use proplab_core::simulation::{aggregate_runs, run_many, SimConfig};
use proplab_core::Execution;
use serde::Serialize;

use config::{read_json, read_or_default, CorpusConfig, FiguresConfig};
use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "proplab", version, about = "Community selection under social feedback")]
struct Cli {
    /// Master seed; falls back to PROPLAB_SEED, then to the config file.
    #[arg(long, global = true, env = "PROPLAB_SEED")]
    seed: Option<u64>,

    /// Run every loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic event log from the generative model.
    Generate(GenerateArgs),
    /// Fit model parameters to an event log by MCMC.
    Fit(FitArgs),
    /// Next-community distribution for every user of a log.
    Predict(PredictArgs),
    /// Score the fitted model and the baselines over training fractions.
    Evaluate(EvaluateArgs),
    /// Run community seeding experiments.
    Simulate(SimulateArgs),
    /// Write fig1.csv, fig2.csv and fig3.csv from synthetic data.
    ReplicateFigures(FiguresArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// JSON corpus description; defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    users: Option<usize>,
    /// Actions per user.
    #[arg(long, conflicts_with = "actions_mean")]
    actions: Option<usize>,
    /// Poisson mean of actions per user.
    #[arg(long)]
    actions_mean: Option<f64>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Event log (JSONL).
    log: PathBuf,
    /// JSON fit configuration; defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Total MCMC iterations.
    #[arg(long)]
    samples: Option<usize>,
    /// Discarded iterations; a quarter of the samples when only those are given.
    #[arg(long)]
    burn_in: Option<usize>,
    /// Sample per-user initial propensities instead of point-estimating them.
    #[arg(long)]
    latent: bool,
    #[arg(long)]
    reply_cap: Option<f64>,
    /// Drop this final share of each user's actions before fitting, matching
    /// the test suffix that `evaluate` holds out.
    #[arg(long)]
    holdout: Option<f64>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Histories to extend (JSONL event log).
    log: PathBuf,
    /// Fitted model (JSON).
    fit: PathBuf,
    /// JSONL output; stdout when absent.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    log: PathBuf,
    fit: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8,1.0")]
    fractions: Vec<f64>,
    /// Window length of the K-max baselines.
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 10)]
    min_actions: usize,
    /// Also write the reply-response curve of the log here.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Sweep CSV; stdout when absent.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON simulation config; defaults are used when absent.
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    /// Per-regime mean curves CSV.
    #[arg(long)]
    aggregate: Option<PathBuf>,
    /// Trajectory CSV: run, round, interest, regime.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct FiguresArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Shrink every experiment to a smoke-test size.
    #[arg(long)]
    quick: bool,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    let ctx = Ctx { seed: cli.seed, exec };
    let result = match cli.command {
        Command::Generate(a) => generate(&ctx, a),
        Command::Fit(a) => fit_cmd(&ctx, a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Simulate(a) => simulate(&ctx, a),
        Command::ReplicateFigures(a) => figures(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

struct Ctx {
    seed: Option<u64>,
    exec: Execution,
}

#[derive(Serialize)]
struct GenerateSnapshot<'a> {
    corpus: &'a CorpusConfig,
    seed: u64,
}

fn generate(ctx: &Ctx, a: GenerateArgs) -> Result<()> {
    let (mut corpus, file_seed) = match &a.config {
        Some(p) => {
            let v: serde_json::Value = read_json(p)?;
            let seed = v.get("seed").and_then(|s| s.as_u64());
            (serde_json::from_value::<CorpusConfig>(v)?, seed)
        }
        None => (CorpusConfig::default(), None),
    };
    if let Some(n) = a.users {
        corpus.users = n;
    }
    if let Some(n) = a.actions {
        corpus.actions = ActionCount::Fixed(n);
    }
    if let Some(m) = a.actions_mean {
        corpus.actions = ActionCount::Poisson(m);
    }
    let seed = ctx.seed.or(file_seed).unwrap_or(0);
    let params = corpus.model(seed)?;
    let log = generate_synthetic_log(&params, corpus.users, corpus.actions, &corpus.feedback, seed)?;
    save_event_log(&log, &a.output)?;

    let mut m = RunManifest::new("generate", GenerateSnapshot { corpus: &corpus, seed })?.seed("master", seed);
    if let Some(p) = &a.config {
        m.input(p)?;
    }
    m.output(&a.output)?;
    m.summary = serde_json::json!({ "model": params, "n_actions": log.len() });
    m.write_for(&a.output)?;
    Ok(())
}

fn fit_cmd(ctx: &Ctx, a: FitArgs) -> Result<()> {
    let mut cfg: FitConfig = read_or_default(a.config.as_deref())?;
    if let Some(n) = a.samples {
        cfg.n_samples = n;
        cfg.burn_in = a.burn_in.unwrap_or(n / 4);
    } else if let Some(b) = a.burn_in {
        cfg.burn_in = b;
    }
    if a.latent {
        cfg.q0_treatment = Q0Treatment::SampleLatent;
    }
    if a.reply_cap.is_some() {
        cfg.reply_cap = a.reply_cap;
    }
    if let Some(s) = ctx.seed {
        cfg.rng_seed = s;
    }
    cfg.execution = ctx.exec;

    let mut log = load_event_log(&a.log).with_context(|| format!("loading {}", a.log.display()))?;
    if let Some(f) = a.holdout {
        log = training_log(
            &log,
            &SweepConfig {
                test_fraction: f,
                ..SweepConfig::default()
            },
        );
    }
    let res = fit(&log, &cfg)?;
    write_atomic(&a.output, res.to_json()?.as_bytes())?;

    let mut m = RunManifest::new("fit", &cfg)?.seed("mcmc", cfg.rng_seed);
    m.input(&a.log)?;
    if let Some(p) = &a.config {
        m.input(p)?;
    }
    m.output(&a.output)?;
    m.summary = serde_json::json!({
        "holdout": a.holdout,
        "n_actions_fitted": log.len(),
        "map_log_posterior": res.map_log_posterior,
        "acceptance": res.diagnostics.acceptance,
    });
    m.write_for(&a.output)?;
    Ok(())
}

fn load_fit(path: &Path) -> Result<FitResult> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    FitResult::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Serialize)]
struct Prediction<'a> {
    user: &'a str,
    next_seq: usize,
    probs: &'a BTreeMap<String, f64>,
    unseen: f64,
}

fn predict(a: PredictArgs) -> Result<()> {
    let log = load_event_log(&a.log)?;
    let fit = load_fit(&a.fit)?;
    let mut out = Vec::new();
    for u in log.users() {
        let d = predict_next(&fit, &u.user, &u.actions)?;
        let line = Prediction {
            user: &u.user,
            next_seq: u.actions.len(),
            probs: d.probs(),
            unseen: d.unseen(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    let Some(path) = &a.output else {
        std::io::stdout().write_all(&out)?;
        return Ok(());
    };
    write_atomic(path, &out)?;
    let mut m = RunManifest::new("predict", serde_json::json!({}))?;
    m.input(&a.log)?;
    m.input(&a.fit)?;
    m.output(path)?;
    m.write_for(path)?;
    Ok(())
}

#[derive(Clone, Serialize)]
struct EvaluateSnapshot {
    fractions: Vec<f64>,
    k: usize,
    test_fraction: f64,
    min_actions: usize,
}

fn sweep_with_fit(
    log: &proplab_core::EventLog,
    fit: &FitResult,
    snap: &EvaluateSnapshot,
    exec: Execution,
) -> Result<SweepResult> {
    let mut predictors = standard_predictors(fit, snap.k)?;
    let full = FullModel {
        execution: exec,
        ..FullModel::from_fit(fit)
    };
    predictors[0] = Box::new(full);
    let refs: Vec<&dyn Predictor> = predictors.iter().map(|p| p.as_ref()).collect();
    let cfg = SweepConfig {
        test_fraction: snap.test_fraction,
        min_actions: snap.min_actions,
        execution: exec,
    };
    Ok(training_fraction_sweep(log, &snap.fractions, &refs, &cfg)?)
}

fn sweep_summary(res: &SweepResult) -> serde_json::Value {
    serde_json::json!({
        "test_set_hash": res.test_set_hash,
        "skipped_short_users": res.skipped_short_users,
        "skipped_empty_windows": res.skipped_empty_windows,
    })
}

fn evaluate(ctx: &Ctx, a: EvaluateArgs) -> Result<()> {
    let log = load_event_log(&a.log)?;
    let fit = load_fit(&a.fit)?;
    let snap = EvaluateSnapshot {
        fractions: a.fractions.clone(),
        k: a.k,
        test_fraction: a.test_fraction,
        min_actions: a.min_actions,
    };
    let res = sweep_with_fit(&log, &fit, &snap, ctx.exec)?;
    let csv = tables::sweep_csv(&res)?;
    if let Some(p) = &a.curve {
        let curve = feedback_response_curve(&log, &Default::default());
        write_atomic(p, &tables::response_csv(&curve)?)?;
    }
    let Some(path) = &a.output else {
        std::io::stdout().write_all(&csv)?;
        return Ok(());
    };
    write_atomic(path, &csv)?;
    let mut m = RunManifest::new("evaluate", &snap)?;
    m.input(&a.log)?;
    m.input(&a.fit)?;
    m.output(path)?;
    if let Some(p) = &a.curve {
        m.output(p)?;
    }
    m.summary = sweep_summary(&res);
    m.write_for(path)?;
    Ok(())
}

#[derive(Serialize)]
struct SimulateSnapshot<'a> {
    sim: &'a SimConfig,
    runs: usize,
}

fn simulate(ctx: &Ctx, a: SimulateArgs) -> Result<()> {
    if a.runs == 0 {
        bail!("--runs must be at least 1");
    }
    let mut cfg: SimConfig = read_or_default(a.config.as_deref())?;
    if let Some(s) = ctx.seed {
        cfg.rng_seed = s;
    }
    cfg.execution = ctx.exec;
    let runs = run_many(&cfg, a.runs, ctx.exec)?;
    write_atomic(&a.output, &tables::trajectories_csv(&runs)?)?;
    if let Some(p) = &a.aggregate {
        write_atomic(p, &tables::regime_curves_csv(&aggregate_runs(&runs)?)?)?;
    }

    let mut m = RunManifest::new("simulate", SimulateSnapshot { sim: &cfg, runs: a.runs })?
        .seed("first_run", cfg.rng_seed);
    if let Some(p) = &a.config {
        m.input(p)?;
    }
    m.output(&a.output)?;
    if let Some(p) = &a.aggregate {
        m.output(p)?;
    }
    m.write_for(&a.output)?;
    Ok(())
}

fn figures(ctx: &Ctx, a: FiguresArgs) -> Result<()> {
    let mut cfg: FiguresConfig = read_or_default(a.config.as_deref())?;
    if a.quick {
        cfg = cfg.quick();
    }
    let seed = ctx.seed.unwrap_or(0);
    std::fs::create_dir_all(&a.out_dir)?;
    let out = |name: &str| a.out_dir.join(name);

    let r = &cfg.response;
    let params = r.corpus.model(seed)?;
    let log = generate_synthetic_log(&params, r.corpus.users, r.corpus.actions, &r.corpus.feedback, seed)?;
    let curve = feedback_response_curve(&log, &r.buckets);
    write_atomic(out("fig1.csv"), &tables::response_csv(&curve)?)?;

    let s = &mut cfg.sweep;
    let params = s.corpus.model(seed.wrapping_add(1))?;
    let log = generate_synthetic_log(&params, s.corpus.users, s.corpus.actions, &s.corpus.feedback, seed.wrapping_add(1))?;
    let snap = EvaluateSnapshot {
        fractions: s.fractions.clone(),
        k: s.k,
        test_fraction: s.test_fraction,
        min_actions: s.min_actions,
    };
    s.fit.rng_seed = seed;
    s.fit.execution = ctx.exec;
    let train = training_log(
        &log,
        &SweepConfig {
            test_fraction: s.test_fraction,
            min_actions: s.min_actions,
            execution: ctx.exec,
        },
    );
    let fitted = fit(&train, &s.fit)?;
    let sweep = sweep_with_fit(&log, &fitted, &snap, ctx.exec)?;
    write_atomic(out("fig2.csv"), &tables::sweep_csv(&sweep)?)?;

    let sim = &mut cfg.simulation;
    sim.sim.rng_seed = seed;
    let runs = run_many(&sim.sim, sim.runs, ctx.exec)?;
    write_atomic(out("fig3.csv"), &tables::regime_curves_csv(&aggregate_runs(&runs)?)?)?;

    let mut m = RunManifest::new("replicate-figures", &cfg)?
        .seed("response_corpus", seed)
        .seed("sweep_corpus", seed.wrapping_add(1))
        .seed("mcmc", seed)
        .seed("first_simulation_run", seed);
    if let Some(p) = &a.config {
        m.input(p)?;
    }
    for name in ["fig1.csv", "fig2.csv", "fig3.csv"] {
        m.output(&out(name))?;
    }
    let regimes: BTreeMap<String, usize> = aggregate_runs(&runs)?
        .iter()
        .map(|c| (c.regime.name().to_string(), c.count))
        .collect();
    m.summary = serde_json::json!({
        "sweep": sweep_summary(&sweep),
        "fitted": fitted.map_params,
        "regime_counts": regimes,
    });
    m.write_for(&a.out_dir)?;
    Ok(())
}
