//! Event logs: ordered per-user actions with the feedback each received.
//!
//! On disk a log is JSONL, one record per line:
//!
//! ```text
//! {"user":"u1","seq":0,"community":"rust","replies":3,"score":12}
//! ```
//!
//! `seq` numbers each user's actions from 0 without gaps. Records may be
//! interleaved across users in any order; the original line order is kept so
//! that saving a loaded log reproduces the file.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::hdp::sample_dirichlet;
use crate::model::{sample_trajectory_with, CommunityId, FeedbackModel, RawFeedback};
use crate::params::ModelParams;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventRecord {
    pub user: String,
    pub seq: u64,
    pub community: CommunityId,
    pub replies: u32,
    pub score: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub community: CommunityId,
    pub feedback: RawFeedback,
}

impl Action {
    pub fn new(community: impl Into<CommunityId>, replies: u32, score: i64) -> Self {
        Self {
            community: community.into(),
            feedback: RawFeedback { replies, score },
        }
    }
}

/// One user's actions in `seq` order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub user: String,
    pub actions: Vec<Action>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EventLog {
    records: Vec<EventRecord>,
}

impl EventLog {
    pub fn from_records(records: Vec<EventRecord>) -> Result<Self> {
        let mut seqs: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
        for r in &records {
            seqs.entry(r.user.as_str()).or_default().push(r.seq);
        }
        for (user, mut s) in seqs {
            s.sort_unstable();
            for (expected, got) in s.iter().enumerate() {
                let expected = expected as u64;
                if *got != expected {
                    let message = if *got < expected {
                        format!("duplicate seq {got}")
                    } else {
                        format!("seq gap: expected {expected}, found {got}")
                    };
                    return Err(Error::Validation {
                        user: user.to_string(),
                        message,
                    });
                }
            }
        }
        Ok(Self { records })
    }

    /// Builds a log from per-user sequences, numbering each from 0.
    pub fn from_users(users: &[UserSequence]) -> Self {
        let records = users
            .iter()
            .flat_map(|u| {
                u.actions.iter().enumerate().map(move |(i, a)| EventRecord {
                    user: u.user.clone(),
                    seq: i as u64,
                    community: a.community.clone(),
                    replies: a.feedback.replies,
                    score: a.feedback.score,
                })
            })
            .collect();
        Self { records }
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Per-user sequences, users in lexicographic order.
    pub fn users(&self) -> Vec<UserSequence> {
        let mut by_user: BTreeMap<&str, Vec<&EventRecord>> = BTreeMap::new();
        for r in &self.records {
            by_user.entry(r.user.as_str()).or_default().push(r);
        }
        by_user
            .into_iter()
            .map(|(user, mut recs)| {
                recs.sort_by_key(|r| r.seq);
                UserSequence {
                    user: user.to_string(),
                    actions: recs
                        .into_iter()
                        .map(|r| Action::new(r.community.clone(), r.replies, r.score))
                        .collect(),
                }
            })
            .collect()
    }

    pub fn reply_counts(&self) -> impl Iterator<Item = u32> + '_ {
        self.records.iter().map(|r| r.replies)
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EventRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(rec);
        }
        Self::from_records(records)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_jsonl_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        buf
    }
}

pub fn load_event_log(path: impl AsRef<Path>) -> Result<EventLog> {
    let f = fs::File::open(path)?;
    EventLog::read_jsonl(BufReader::new(f))
}

pub fn save_event_log(log: &EventLog, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &log.to_jsonl_bytes())
}

/// Writes to a sibling temporary file, then renames over the target.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// How many actions each synthetic user takes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum ActionCount {
    Fixed(usize),
    Poisson(f64),
}

/// Samples a corpus from the generative model: every user gets
/// `q0 ~ Dirichlet(alpha0 * beta)` and then a trajectory. Each user draws from
/// its own RNG stream, so the result does not depend on thread scheduling.
pub fn generate_synthetic_log(
    params: &ModelParams,
    n_users: usize,
    actions: ActionCount,
    feedback: &FeedbackModel,
    rng_seed: u64,
) -> Result<EventLog> {
    generate_synthetic_users(params, n_users, actions, feedback, rng_seed, Execution::default())
        .map(|users| EventLog::from_users(&users))
}

pub fn generate_synthetic_users(
    params: &ModelParams,
    n_users: usize,
    actions: ActionCount,
    feedback: &FeedbackModel,
    rng_seed: u64,
    exec: Execution,
) -> Result<Vec<UserSequence>> {
    params.validate()?;
    feedback.validate()?;
    match actions {
        ActionCount::Poisson(m) if !(m > 0.0 && m.is_finite()) => {
            return Err(Error::InvalidArgument(format!(
                "mean action count must be positive, got {m}"
            )))
        }
        _ => {}
    }
    let width = n_users.saturating_sub(1).to_string().len().max(4);
    let alpha = params.dirichlet_alpha();
    exec.map_range(n_users, |u| {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        rng.set_stream(u as u64);
        let user = format!("u{u:0width$}");
        let q0 = sample_dirichlet(&alpha, &mut rng)?;
        let n = match actions {
            ActionCount::Fixed(n) => n,
            ActionCount::Poisson(m) => {
                let k: f64 = Poisson::new(m).expect("positive mean").sample(&mut rng);
                k as usize
            }
        };
        let mut source = *feedback;
        let draws = sample_trajectory_with(params, &q0, n, &mut source, &mut rng, |i| {
            format!("novel-{user}-{i}")
        })?;
        Ok(UserSequence {
            user,
            actions: draws
                .into_iter()
                .map(|d| Action {
                    community: d.community,
                    feedback: d.feedback,
                })
                .collect(),
        })
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = concat!(
        "{\"user\":\"a\",\"seq\":0,\"community\":\"x\",\"replies\":1,\"score\":2}\n",
        "{\"user\":\"b\",\"seq\":0,\"community\":\"y\",\"replies\":0,\"score\":-1}\n",
        "{\"user\":\"a\",\"seq\":1,\"community\":\"y\",\"replies\":4,\"score\":0}\n",
        "{\"user\":\"b\",\"seq\":1,\"community\":\"y\",\"replies\":2,\"score\":7}\n",
    );

    #[test]
    fn empty_input_is_empty_log() {
        let log = EventLog::read_jsonl("".as_bytes()).unwrap();
        assert!(log.is_empty());
        assert!(log.users().is_empty());
    }

    #[test]
    fn toy_roundtrips_byte_identically() {
        let log = EventLog::read_jsonl(TOY.as_bytes()).unwrap();
        let users = log.users();
        assert_eq!(users.len(), 2);
        assert!(users.iter().all(|u| u.actions.len() == 2));
        assert_eq!(users[0].actions[1], Action::new("y", 4, 0));
        assert_eq!(log.to_jsonl_bytes(), TOY.as_bytes());
    }

    #[test]
    fn missing_field_reports_line() {
        let bad = format!(
            "{}{}",
            TOY.lines().next().unwrap().to_owned() + "\n",
            "{\"user\":\"a\",\"seq\":1,\"replies\":0,\"score\":0}\n"
        );
        match EventLog::read_jsonl(bad.as_bytes()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("community"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn negative_replies_rejected() {
        let bad = "{\"user\":\"a\",\"seq\":0,\"community\":\"x\",\"replies\":-1,\"score\":0}\n";
        assert!(matches!(
            EventLog::read_jsonl(bad.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn seq_gaps_and_duplicates_name_the_user() {
        let gap = "{\"user\":\"a\",\"seq\":0,\"community\":\"x\",\"replies\":0,\"score\":0}\n\
                   {\"user\":\"a\",\"seq\":2,\"community\":\"x\",\"replies\":0,\"score\":0}\n";
        match EventLog::read_jsonl(gap.as_bytes()) {
            Err(Error::Validation { user, message }) => {
                assert_eq!(user, "a");
                assert!(message.contains("gap"));
            }
            other => panic!("{other:?}"),
        }
        let dup = "{\"user\":\"q\",\"seq\":0,\"community\":\"x\",\"replies\":0,\"score\":0}\n\
                   {\"user\":\"q\",\"seq\":0,\"community\":\"y\",\"replies\":0,\"score\":0}\n";
        match EventLog::read_jsonl(dup.as_bytes()) {
            Err(Error::Validation { user, message }) => {
                assert_eq!(user, "q");
                assert!(message.contains("duplicate"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn out_of_order_lines_sort_by_seq() {
        let log = EventLog::read_jsonl(
            "{\"user\":\"a\",\"seq\":1,\"community\":\"late\",\"replies\":0,\"score\":0}\n\
             {\"user\":\"a\",\"seq\":0,\"community\":\"early\",\"replies\":0,\"score\":0}\n"
                .as_bytes(),
        )
        .unwrap();
        let users = log.users();
        assert_eq!(users[0].actions[0].community, "early");
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let log = EventLog::read_jsonl(TOY.as_bytes()).unwrap();
        save_event_log(&log, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), TOY.as_bytes());
        assert_eq!(load_event_log(&path).unwrap(), log);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
