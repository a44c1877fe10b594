//! The prepared-dataset directory: `users.tsv`, `items.tsv`,
//! `sequences.txt`, `split.tsv`, `edges.tsv` and `stats.json`.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Dataset, DatasetStats, UserSplit};
use crate::error::{Error, Result};

const FILES: [&str; 6] = ["users.tsv", "items.tsv", "sequences.txt", "split.tsv", "edges.tsv", "stats.json"];

fn render(ds: &Dataset) -> Result<Vec<(&'static str, String)>> {
    let mut users = String::new();
    for (u, raw) in ds.user_ids.iter().enumerate() {
        writeln!(users, "{raw}\t{u}").unwrap();
    }
    let mut items = String::new();
    for (i, raw) in ds.item_ids.iter().enumerate() {
        writeln!(items, "{raw}\t{}", i + 1).unwrap();
    }
    let mut seqs = String::new();
    for (u, s) in ds.sequences.iter().enumerate() {
        write!(seqs, "{u}").unwrap();
        for i in s {
            write!(seqs, " {i}").unwrap();
        }
        seqs.push('\n');
    }
    let mut split = String::new();
    for (u, s) in ds.splits.iter().enumerate() {
        writeln!(split, "{u}\t{}\t{}\t{}\t{}", s.train_len, s.train_target, s.valid_target, s.test_target).unwrap();
    }
    let mut edges = String::new();
    for (u, i) in &ds.edges {
        writeln!(edges, "{u}\t{i}").unwrap();
    }
    let stats = serde_json::to_string_pretty(&ds.stats).map_err(|e| Error::Format(e.to_string()))? + "\n";
    Ok(FILES.into_iter().zip([users, items, seqs, split, edges, stats]).collect())
}

pub fn write_prepared(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, body) in render(ds)? {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn read(dir: &Path, name: &str) -> Result<String> {
    let p = dir.join(name);
    std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
}

fn bad(name: &str, line: usize, what: &str) -> Error {
    Error::Data(format!("{name}:{line}: {what}"))
}

/// Reads `raw<TAB>dense` lines whose dense ids must run `first, first+1, …`.
fn read_id_map(dir: &Path, name: &str, first: usize) -> Result<Vec<String>> {
    let text = read(dir, name)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let (raw, id) = line.rsplit_once('\t').ok_or_else(|| bad(name, n + 1, "expected raw<TAB>id"))?;
        let id: usize = id.parse().map_err(|_| bad(name, n + 1, "bad dense id"))?;
        if id != first + out.len() {
            return Err(bad(name, n + 1, "dense ids must be consecutive"));
        }
        out.push(raw.to_string());
    }
    Ok(out)
}

fn numbers(name: &str, n: usize, line: &str, sep: impl Fn(char) -> bool) -> Result<Vec<usize>> {
    line.split(sep)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad(name, n + 1, "expected integers")))
        .collect()
}

pub fn read_prepared(dir: &Path) -> Result<Dataset> {
    let user_ids = read_id_map(dir, "users.tsv", 0)?;
    let item_ids = read_id_map(dir, "items.tsv", 1)?;
    let mut sequences = Vec::with_capacity(user_ids.len());
    for (n, line) in read(dir, "sequences.txt")?.lines().enumerate() {
        let v = numbers("sequences.txt", n, line, |c| c == ' ')?;
        if v.first() != Some(&n) {
            return Err(bad("sequences.txt", n + 1, "users must be listed in order"));
        }
        sequences.push(v[1..].to_vec());
    }
    let stats: DatasetStats =
        serde_json::from_str(&read(dir, "stats.json")?).map_err(|e| Error::Data(format!("stats.json: {e}")))?;
    let ds = Dataset::from_sequences(user_ids, item_ids, sequences, stats.dropped_users)?;

    // The split and edge files are derived data; they must agree with the
    // sequences they were written from.
    let split_text = read(dir, "split.tsv")?;
    let mut splits = Vec::new();
    for (n, line) in split_text.lines().enumerate() {
        let v = numbers("split.tsv", n, line, |c| c == '\t')?;
        if v.len() != 5 || v[0] != n {
            return Err(bad("split.tsv", n + 1, "expected user, train_len and three targets"));
        }
        splits.push(UserSplit {
            train_len: v[1],
            train_target: v[2],
            valid_target: v[3],
            test_target: v[4],
        });
    }
    if splits != ds.splits {
        return Err(Error::Data("split.tsv disagrees with sequences.txt".into()));
    }
    let mut edges = Vec::new();
    for (n, line) in read(dir, "edges.tsv")?.lines().enumerate() {
        match numbers("edges.tsv", n, line, |c| c == '\t')?.as_slice() {
            [u, i] => edges.push((*u, *i)),
            _ => return Err(bad("edges.tsv", n + 1, "expected user<TAB>item")),
        }
    }
    if edges != ds.edges {
        return Err(Error::Data("edges.tsv disagrees with the training split".into()));
    }
    Ok(ds)
}

/// SHA-256 over the canonical rendering of every prepared file.
pub fn dataset_digest(ds: &Dataset) -> Result<String> {
    let mut h = Sha256::new();
    for (name, body) in render(ds)? {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(body.as_bytes());
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
