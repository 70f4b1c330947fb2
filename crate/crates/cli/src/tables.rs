//! CSV layouts of the figure data. Floats use the shortest representation
//! that parses back to the same value; undefined entries are left empty.

use anyhow::Result;
use proplab_core::evaluation::{BucketResponse, SweepResult};
use proplab_core::simulation::{RegimeCurve, TrajectorySummary};

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

pub fn response_csv(curve: &[BucketResponse]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "bucket",
        "lower_bound",
        "transitions",
        "returns",
        "return_rate",
        "relative_return",
        "std_error",
    ])?;
    for b in curve {
        w.write_record([
            b.label.clone(),
            b.lower.to_string(),
            b.transitions.to_string(),
            b.returns.to_string(),
            opt(b.return_rate),
            opt(b.relative),
            opt(b.std_error),
        ])?;
    }
    finish(w)
}

pub fn sweep_csv(res: &SweepResult) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "training_fraction",
        "predictor",
        "mean_score",
        "std_error",
        "n_test_events",
        "n_users",
    ])?;
    for r in &res.rows {
        w.write_record([
            r.training_fraction.to_string(),
            r.predictor.clone(),
            r.mean_score.to_string(),
            r.std_error.to_string(),
            r.n_test_events.to_string(),
            r.n_users.to_string(),
        ])?;
    }
    finish(w)
}

/// One row per run and round; rounds are 1-based and the regime column
/// repeats the run's classification (empty when unclassified).
pub fn trajectories_csv(runs: &[TrajectorySummary]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["run", "round", "interest", "regime"])?;
    for (r, t) in runs.iter().enumerate() {
        let regime = t.regime.map(|g| g.name().to_string()).unwrap_or_default();
        for (i, x) in t.interest.iter().enumerate() {
            w.write_record([r.to_string(), (i + 1).to_string(), x.to_string(), regime.clone()])?;
        }
    }
    finish(w)
}

pub fn regime_curves_csv(curves: &[RegimeCurve]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["regime", "n_runs", "round", "mean_interest"])?;
    for c in curves {
        for (i, x) in c.mean_interest.iter().enumerate() {
            w.write_record([
                c.regime.name().to_string(),
                c.count.to_string(),
                (i + 1).to_string(),
                x.to_string(),
            ])?;
        }
    }
    finish(w)
}
