//! Interaction logs to train/valid/test datasets.
//!
//! Dense user ids start at 0. Dense item ids start at 1; item 0 is the
//! padding index and never appears in a sequence.

mod prepared;

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_bipartite, BipartiteGraph};

pub use prepared::{dataset_digest, read_prepared, write_prepared};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

/// A line that failed to parse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejection {
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
    pub rejected: Vec<Rejection>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    /// `user<TAB>item<TAB>timestamp`
    Tsv,
    /// `user::item::rating::timestamp`
    Movielens,
}

impl FromStr for LogFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(Self::Tsv),
            "movielens" => Ok(Self::Movielens),
            other => Err(Error::Config(format!("log format '{other}' (expected tsv or movielens)"))),
        }
    }
}

impl fmt::Display for LogFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Tsv => "tsv",
            Self::Movielens => "movielens",
        })
    }
}

fn parse_line(line: &str, format: LogFormat) -> std::result::Result<Interaction, String> {
    let fields: Vec<&str> = match format {
        LogFormat::Tsv => line.split('\t').collect(),
        LogFormat::Movielens => line.split("::").collect(),
    };
    let (user, item, ts) = match (format, fields.as_slice()) {
        (LogFormat::Tsv, [u, i, t]) => (u, i, t),
        (LogFormat::Movielens, [u, i, _rating, t]) => (u, i, t),
        _ => return Err(format!("expected {} fields, found {}", if format == LogFormat::Tsv { 3 } else { 4 }, fields.len())),
    };
    let (user, item) = (user.trim(), item.trim());
    if user.is_empty() || item.is_empty() {
        return Err("empty user or item id".into());
    }
    let timestamp: i64 = ts.trim().parse().map_err(|_| format!("bad timestamp '{}'", ts.trim()))?;
    if timestamp < 0 {
        return Err(format!("negative timestamp {timestamp}"));
    }
    Ok(Interaction {
        user: user.to_string(),
        item: item.to_string(),
        timestamp,
    })
}

/// Parses log text. Blank lines are skipped; malformed lines are collected
/// with their 1-based line numbers.
pub fn parse_interactions_str(text: &str, format: LogFormat) -> Result<InteractionLog> {
    let mut log = InteractionLog::default();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line, format) {
            Ok(r) => log.records.push(r),
            Err(reason) => log.rejected.push(Rejection { line: n + 1, reason }),
        }
    }
    if log.records.is_empty() {
        return Err(Error::Data("zero valid records".into()));
    }
    Ok(log)
}

pub fn parse_interactions(path: &Path, format: LogFormat) -> Result<InteractionLog> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Data(format!("{}: not UTF-8 ({e})", path.display())))?;
    parse_interactions_str(&text, format)
}

/// Removes users and items with fewer than `k` interactions until none
/// remain. Record order is preserved.
pub fn kcore_filter(log: &InteractionLog, k: usize) -> Result<InteractionLog> {
    if k == 0 {
        return Err(Error::InvalidArgument("k-core threshold must be at least 1".into()));
    }
    let mut users: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut items: HashMap<&str, Vec<usize>> = HashMap::new();
    for (r, rec) in log.records.iter().enumerate() {
        users.entry(&rec.user).or_default().push(r);
        items.entry(&rec.item).or_default().push(r);
    }
    let mut user_deg: HashMap<&str, usize> = users.iter().map(|(&u, v)| (u, v.len())).collect();
    let mut item_deg: HashMap<&str, usize> = items.iter().map(|(&i, v)| (i, v.len())).collect();
    let mut alive = vec![true; log.records.len()];

    // Peel every under-threshold node; removing its records can push
    // neighbors under the threshold in turn.
    let mut queue: VecDeque<(bool, &str)> = VecDeque::new();
    queue.extend(user_deg.iter().filter(|(_, &d)| d < k).map(|(&u, _)| (true, u)));
    queue.extend(item_deg.iter().filter(|(_, &d)| d < k).map(|(&i, _)| (false, i)));
    while let Some((is_user, key)) = queue.pop_front() {
        let records = if is_user { &users[key] } else { &items[key] };
        for &r in records {
            if !alive[r] {
                continue;
            }
            alive[r] = false;
            let rec = &log.records[r];
            let (deg, other, other_is_user) = if is_user {
                (&mut item_deg, rec.item.as_str(), false)
            } else {
                (&mut user_deg, rec.user.as_str(), true)
            };
            let d = deg.get_mut(other).unwrap();
            *d -= 1;
            if *d + 1 == k {
                queue.push_back((other_is_user, other));
            }
        }
        if is_user {
            user_deg.insert(key, 0);
        } else {
            item_deg.insert(key, 0);
        }
    }
    let records: Vec<Interaction> = log.records.iter().zip(&alive).filter(|(_, &a)| a).map(|(r, _)| r.clone()).collect();
    if records.is_empty() {
        return Err(Error::Data(format!("{k}-core filtering removed every record; try a smaller k")));
    }
    Ok(InteractionLog {
        records,
        rejected: log.rejected.clone(),
    })
}

/// Chronological per-user sequences with dense ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequences {
    /// Raw id of dense user `u`.
    pub user_ids: Vec<String>,
    /// Raw id of dense item `i` at position `i − 1`.
    pub item_ids: Vec<String>,
    pub sequences: Vec<Vec<usize>>,
}

/// Groups records by user and orders each group by `(timestamp, item id)`.
/// Dense ids follow first appearance in the log.
pub fn build_sequences(log: &InteractionLog) -> Sequences {
    let mut user_index: HashMap<&str, usize> = HashMap::new();
    let mut item_index: HashMap<&str, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut events: Vec<Vec<(i64, usize)>> = Vec::new();
    for rec in &log.records {
        let u = *user_index.entry(&rec.user).or_insert_with(|| {
            user_ids.push(rec.user.clone());
            events.push(Vec::new());
            user_ids.len() - 1
        });
        let i = *item_index.entry(&rec.item).or_insert_with(|| {
            item_ids.push(rec.item.clone());
            item_ids.len()
        });
        events[u].push((rec.timestamp, i));
    }
    let sequences = events
        .into_iter()
        .map(|mut e| {
            e.sort_unstable();
            e.into_iter().map(|(_, i)| i).collect()
        })
        .collect();
    Sequences {
        user_ids,
        item_ids,
        sequences,
    }
}

/// Split positions of one user: the last three items are the train, valid and
/// test targets; everything before the train target is the train input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UserSplit {
    pub train_len: usize,
    pub train_target: usize,
    pub valid_target: usize,
    pub test_target: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Valid,
    Test,
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "valid" => Ok(Self::Valid),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("phase '{other}' (expected train, valid or test)"))),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Valid => "valid",
            Self::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_users: usize,
    pub num_items: usize,
    pub num_interactions: usize,
    pub sparsity: f64,
    pub avg_length: f64,
    pub dropped_users: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    /// Full chronological sequence of every kept user.
    pub sequences: Vec<Vec<usize>>,
    pub splits: Vec<UserSplit>,
    /// `(user, dense item)` training-graph edges, sorted and deduplicated.
    pub edges: Vec<(usize, usize)>,
    pub stats: DatasetStats,
}

pub const MIN_SEQUENCE_LEN: usize = 4;

/// Leave-one-out split. Users with fewer than four interactions are dropped
/// and counted in `stats.dropped_users`; kept users are renumbered densely in
/// their original order.
pub fn leave_one_out_split(seqs: Sequences) -> Result<Dataset> {
    let mut user_ids = Vec::new();
    let mut sequences = Vec::new();
    let mut dropped = 0;
    for (raw, seq) in seqs.user_ids.into_iter().zip(seqs.sequences) {
        if seq.len() < MIN_SEQUENCE_LEN {
            dropped += 1;
        } else {
            user_ids.push(raw);
            sequences.push(seq);
        }
    }
    Dataset::from_sequences(user_ids, seqs.item_ids, sequences, dropped)
}

impl Dataset {
    /// Builds splits, edges and statistics for sequences that all have at
    /// least four items.
    pub fn from_sequences(
        user_ids: Vec<String>,
        item_ids: Vec<String>,
        sequences: Vec<Vec<usize>>,
        dropped_users: usize,
    ) -> Result<Self> {
        if user_ids.len() != sequences.len() {
            return Err(Error::Data(format!("{} user ids for {} sequences", user_ids.len(), sequences.len())));
        }
        if sequences.is_empty() {
            return Err(Error::Data("no user has at least four interactions".into()));
        }
        let num_items = item_ids.len();
        let mut splits = Vec::with_capacity(sequences.len());
        for (u, s) in sequences.iter().enumerate() {
            if s.len() < MIN_SEQUENCE_LEN {
                return Err(Error::Data(format!("user {u} has only {} interactions", s.len())));
            }
            if let Some(&i) = s.iter().find(|&&i| i == 0 || i > num_items) {
                return Err(Error::Data(format!("user {u} references item {i} outside 1..={num_items}")));
            }
            let n = s.len();
            splits.push(UserSplit {
                train_len: n - 3,
                train_target: s[n - 3],
                valid_target: s[n - 2],
                test_target: s[n - 1],
            });
        }
        let edges = build_graph_edges(&sequences, &splits);
        let stats = dataset_stats(&sequences, num_items, dropped_users);
        Ok(Self {
            user_ids,
            item_ids,
            sequences,
            splits,
            edges,
            stats,
        })
    }

    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn train_input(&self, u: usize) -> &[usize] {
        &self.sequences[u][..self.splits[u].train_len]
    }

    /// Model input for predicting the target of `phase`: every item before it.
    pub fn input(&self, u: usize, phase: Phase) -> &[usize] {
        let n = self.splits[u].train_len;
        match phase {
            Phase::Train => &self.sequences[u][..n],
            Phase::Valid => &self.sequences[u][..n + 1],
            Phase::Test => &self.sequences[u][..n + 2],
        }
    }

    pub fn inputs(&self, phase: Phase) -> Vec<&[usize]> {
        (0..self.num_users()).map(|u| self.input(u, phase)).collect()
    }

    pub fn target(&self, u: usize, phase: Phase) -> usize {
        let s = &self.splits[u];
        match phase {
            Phase::Train => s.train_target,
            Phase::Valid => s.valid_target,
            Phase::Test => s.test_target,
        }
    }

    /// Bipartite graph over 0-based item indices (dense id − 1).
    pub fn graph(&self) -> Result<BipartiteGraph> {
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|&(u, i)| (u, i - 1)).collect();
        build_bipartite(&edges, self.num_users(), self.num_items())
    }
}

/// `(u, i)` for every item of the train input and the train target.
pub fn build_graph_edges(sequences: &[Vec<usize>], splits: &[UserSplit]) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = sequences
        .iter()
        .zip(splits)
        .enumerate()
        .flat_map(|(u, (s, sp))| s[..=sp.train_len].iter().map(move |&i| (u, i)))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

pub fn dataset_stats(sequences: &[Vec<usize>], num_items: usize, dropped_users: usize) -> DatasetStats {
    let num_users = sequences.len();
    let num_interactions: usize = sequences.iter().map(Vec::len).sum();
    let cells = num_users as f64 * num_items as f64;
    DatasetStats {
        num_users,
        num_items,
        num_interactions,
        sparsity: if cells > 0.0 { 1.0 - num_interactions as f64 / cells } else { 0.0 },
        avg_length: if num_users > 0 { num_interactions as f64 / num_users as f64 } else { 0.0 },
        dropped_users,
    }
}

/// The most recent `max_len` items, left-padded with 0, and the mask of real
/// positions.
pub fn truncate_pad(seq: &[usize], max_len: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    let recent = &seq[seq.len().saturating_sub(max_len)..];
    let pad = max_len - recent.len();
    let mut items = vec![0; pad];
    items.extend_from_slice(recent);
    let mut mask = vec![false; pad];
    mask.resize(max_len, true);
    Ok((items, mask))
}

/// Parse, filter, order and split in one go.
pub fn prepare(log: &InteractionLog, kcore: usize) -> Result<Dataset> {
    let filtered = kcore_filter(log, kcore)?;
    leave_one_out_split(build_sequences(&filtered))
}
