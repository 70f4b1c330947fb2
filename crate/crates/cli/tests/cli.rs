use std::path::Path;
use std::process::{Command, Output};

use proplab_core::simulation::{classify_trajectory, Regime, RegimeThresholds};

fn proplab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_proplab"))
        .current_dir(dir)
        .env_remove("PROPLAB_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = proplab(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn generate_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["generate", "--users", "10", "--actions", "20", "--seed", "7", "-o", "a.jsonl"]);
    ok(d, &["generate", "--users", "10", "--actions", "20", "--seed", "7", "-o", "b.jsonl"]);
    let a = std::fs::read(d.join("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.jsonl")).unwrap());
    assert_eq!(a.iter().filter(|b| **b == b'\n').count(), 200);
}

#[test]
fn seed_falls_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["generate", "--users", "5", "--actions", "8", "--seed", "3", "-o", "flag.jsonl"]);
    let out = Command::new(env!("CARGO_BIN_EXE_proplab"))
        .current_dir(d)
        .env("PROPLAB_SEED", "3")
        .args(["generate", "--users", "5", "--actions", "8", "-o", "env.jsonl"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read(d.join("flag.jsonl")).unwrap(), std::fs::read(d.join("env.jsonl")).unwrap());
    let manifest = std::fs::read_to_string(d.join("env.jsonl.manifest.json")).unwrap();
    assert!(manifest.contains("\"PROPLAB_SEED\": \"3\""));
}

#[test]
fn fit_then_evaluate_writes_a_sweep_table() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["generate", "--users", "20", "--actions", "25", "--seed", "1", "-o", "log.jsonl"]);
    ok(d, &["fit", "log.jsonl", "--samples", "2000", "-o", "fit.json"]);
    let out = ok(d, &["evaluate", "log.jsonl", "fit.json"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "training_fraction,predictor,mean_score,std_error,n_test_events,n_users"
    );
    // five fractions times six predictors
    assert_eq!(lines.count(), 30);
}

#[test]
fn simulate_regimes_match_their_interest_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = r#"{"n_agents": 15, "seed_rounds": 30, "total_rounds": 80,
        "thresholds": {"early_round": 30, "late_round": 80}}"#;
    std::fs::write(d.join("cfg.json"), cfg).unwrap();
    ok(d, &["simulate", "cfg.json", "--runs", "4", "-o", "traj.csv"]);
    let mut rdr = csv::Reader::from_path(d.join("traj.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["run", "round", "interest", "regime"]);
    let mut runs: Vec<(Vec<f64>, String)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let run: usize = rec[0].parse().unwrap();
        if runs.len() == run {
            runs.push((Vec::new(), rec[3].to_string()));
        }
        runs[run].0.push(rec[2].parse().unwrap());
    }
    let th = RegimeThresholds {
        early_round: 30,
        late_round: 80,
        ..RegimeThresholds::default()
    };
    assert_eq!(runs.len(), 4);
    for (interest, regime) in runs {
        assert_eq!(interest.len(), 80);
        let recomputed = classify_trajectory(&interest, &th).unwrap();
        assert_eq!(regime.parse::<Regime>().unwrap(), recomputed);
    }
}

#[test]
fn figures_are_written_with_headers() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["replicate-figures", "--quick", "--out-dir", "out"]);
    let head = |name: &str| {
        let text = std::fs::read_to_string(d.join("out").join(name)).unwrap();
        text.lines().next().unwrap().to_string()
    };
    assert!(head("fig1.csv").starts_with("bucket,lower_bound"));
    assert!(head("fig2.csv").starts_with("training_fraction,predictor"));
    assert_eq!(head("fig3.csv"), "regime,n_runs,round,mean_interest");
    assert!(d.join("out/manifest.json").exists());
}

#[test]
fn malformed_log_reports_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let log = "{\"user\":\"a\",\"seq\":0,\"community\":\"x\",\"replies\":0,\"score\":0}\n\
               {\"user\":\"a\",\"seq\":1,\"replies\":0,\"score\":0}\n";
    std::fs::write(d.join("bad.jsonl"), log).unwrap();
    let out = proplab(d, &["fit", "bad.jsonl", "-o", "fit.json"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "{err}");
    assert!(!d.join("fit.json").exists());
}

#[test]
fn unknown_arguments_print_usage_and_fail() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["generate", "--bogus", "-o", "x"][..], &[][..]] {
        let out = proplab(tmp.path(), args);
        assert!(!out.status.success());
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"), "{args:?}");
    }
}

#[test]
fn every_subcommand_has_help() {
    let tmp = tempfile::tempdir().unwrap();
    for sub in ["generate", "fit", "predict", "evaluate", "simulate", "replicate-figures"] {
        let out = ok(tmp.path(), &[sub, "--help"]);
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
}
