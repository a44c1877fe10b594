//! Full-ranking top-K evaluation and the popularity baseline.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Phase};
use crate::error::{Error, Result};

pub const DEFAULT_KS: [usize; 2] = [10, 20];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankResult {
    pub user: usize,
    pub rank: usize,
}

/// 0-based rank of `target` among items not in `excluded`, by descending
/// score with ties going to the smaller item id. `scores[i]` belongs to
/// dense item `i + 1`; `excluded` is indexed by dense id and may be shorter
/// than `scores.len() + 1`.
pub fn rank_target(scores: &[f64], target: usize, excluded: &[bool]) -> Result<usize> {
    let is_excluded = |i: usize| excluded.get(i).copied().unwrap_or(false);
    if target == 0 || target > scores.len() {
        return Err(Error::IndexOutOfRange(format!("target item {target} outside 1..={}", scores.len())));
    }
    if is_excluded(target) {
        return Err(Error::Data(format!("target item {target} is in the exclusion set")));
    }
    let s = scores[target - 1];
    if s.is_nan() {
        return Err(Error::Numerical(format!("NaN score for target item {target}")));
    }
    let mut rank = 0;
    for (j, &x) in scores.iter().enumerate() {
        let item = j + 1;
        if item != target && !is_excluded(item) && (x > s || (x == s && item < target)) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// `(HR@K, NDCG@K)` averaged over `ranks`.
pub fn ranking_metrics(ranks: &[RankResult], k: usize) -> Result<(f64, f64)> {
    if ranks.is_empty() {
        return Err(Error::InvalidArgument("no ranks to aggregate".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let (mut hr, mut ndcg) = (0.0, 0.0);
    for r in ranks {
        if r.rank < k {
            hr += 1.0;
            ndcg += 1.0 / ((r.rank + 2) as f64).log2();
        }
    }
    let n = ranks.len() as f64;
    Ok((hr / n, ndcg / n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    /// Treat the validation target as history when ranking test targets.
    pub exclude_valid_at_test: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            exclude_valid_at_test: true,
        }
    }
}

/// Dense-id mask of the items a user has already seen before `phase`'s
/// target: train input and train target, plus the validation target at test
/// time. The phase's own target is never masked, so repeat consumption is
/// still ranked.
pub fn exclusion_mask(ds: &Dataset, u: usize, phase: Phase, opts: EvalOptions, mask: &mut Vec<bool>) {
    mask.clear();
    mask.resize(ds.num_items() + 1, false);
    mask[0] = true;
    let sp = ds.splits[u];
    for &i in &ds.sequences[u][..=sp.train_len] {
        mask[i] = true;
    }
    if phase == Phase::Test && opts.exclude_valid_at_test {
        mask[sp.valid_target] = true;
    }
    mask[ds.target(u, phase)] = false;
}

/// Ranks every user's `phase` target under `score_row(u)`, a slice of `|I|`
/// scores indexed by dense id − 1.
pub fn rank_all<'a>(
    ds: &Dataset,
    phase: Phase,
    opts: EvalOptions,
    mut score_row: impl FnMut(usize) -> &'a [f64],
) -> Result<Vec<RankResult>> {
    let mut mask = Vec::new();
    (0..ds.num_users())
        .map(|u| {
            exclusion_mask(ds, u, phase, opts, &mut mask);
            let scores = score_row(u);
            if scores.len() != ds.num_items() {
                return Err(Error::ShapeMismatch {
                    op: "rank_all",
                    lhs: vec![ds.num_items()],
                    rhs: vec![scores.len()],
                });
            }
            Ok(RankResult {
                user: u,
                rank: rank_target(scores, ds.target(u, phase), &mask)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub phase: Phase,
    pub num_users: usize,
    pub seed: u64,
    pub config_digest: String,
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn from_ranks(phase: Phase, ranks: &[RankResult], ks: &[usize], seed: u64, config_digest: &str) -> Result<Self> {
        let mut rows = Vec::with_capacity(2 * ks.len());
        for &k in ks {
            let (hr, ndcg) = ranking_metrics(ranks, k)?;
            rows.push(MetricRow { metric: "HR".into(), k, value: hr });
            rows.push(MetricRow { metric: "NDCG".into(), k, value: ndcg });
        }
        Ok(Self {
            phase,
            num_users: ranks.len(),
            seed,
            config_digest: config_digest.to_string(),
            rows,
        })
    }

    pub fn get(&self, metric: &str, k: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric && r.k == k).map(|r| r.value)
    }

    pub fn hr(&self, k: usize) -> f64 {
        self.get("HR", k).unwrap_or(f64::NAN)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.get("NDCG", k).unwrap_or(f64::NAN)
    }

    pub fn csv_header() -> &'static str {
        "phase,metric,K,value,num_users,seed\n"
    }

    /// Data rows without the header.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            writeln!(out, "{},{},{},{:.6},{},{}", self.phase, r.metric, r.k, r.value, self.num_users, self.seed).unwrap();
        }
        out
    }

    pub fn to_csv(&self) -> String {
        Self::csv_header().to_string() + &self.csv_rows()
    }
}

/// Writes `metrics.csv` and `metrics.json` covering all `reports`.
pub fn write_metrics(dir: &Path, reports: &[MetricsReport]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut csv = MetricsReport::csv_header().to_string();
    reports.iter().for_each(|r| csv.push_str(&r.csv_rows()));
    let p = dir.join("metrics.csv");
    std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    let json = serde_json::to_string_pretty(reports).map_err(|e| Error::Format(e.to_string()))? + "\n";
    let p = dir.join("metrics.json");
    std::fs::write(&p, json).map_err(|e| Error::io(&p, e))
}

/// Training interaction counts (train input plus train target) per item,
/// indexed by dense id − 1.
pub fn popularity_baseline(ds: &Dataset) -> Vec<f64> {
    let mut counts = vec![0.0; ds.num_items()];
    for (s, sp) in ds.sequences.iter().zip(&ds.splits) {
        for &i in &s[..=sp.train_len] {
            counts[i - 1] += 1.0;
        }
    }
    counts
}

pub fn evaluate_popularity(ds: &Dataset, phase: Phase, ks: &[usize], opts: EvalOptions) -> Result<MetricsReport> {
    let pop = popularity_baseline(ds);
    let ranks = rank_all(ds, phase, opts, |_| &pop)?;
    MetricsReport::from_ranks(phase, &ranks, ks, 0, "popularity")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranks(r: &[usize]) -> Vec<RankResult> {
        r.iter().enumerate().map(|(user, &rank)| RankResult { user, rank }).collect()
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_target(&[0.1, 0.9, 0.3], 2, &[]).unwrap(), 0);
        assert_eq!(rank_target(&[0.5; 6], 2, &[true, true]).unwrap(), 0);
        assert_eq!(rank_target(&[0.5; 6], 4, &[true, true]).unwrap(), 2);
        assert!(rank_target(&[0.5; 3], 2, &[true, false, true]).is_err());
        assert!(rank_target(&[0.5; 3], 0, &[]).is_err());
    }

    #[test]
    fn metric_examples() {
        assert_eq!(ranking_metrics(&ranks(&[0, 0, 0]), 10).unwrap(), (1.0, 1.0));
        let (hr, ndcg) = ranking_metrics(&ranks(&[9]), 10).unwrap();
        assert_eq!(hr, 1.0);
        assert!((ndcg - 1.0 / 11f64.log2()).abs() < 1e-9);
        assert_eq!(ranking_metrics(&ranks(&[10]), 10).unwrap(), (0.0, 0.0));
        assert!(ranking_metrics(&[], 10).is_err());
    }

    #[test]
    fn csv_has_fixed_precision() {
        let r = MetricsReport::from_ranks(Phase::Test, &ranks(&[0, 3, 30]), &DEFAULT_KS, 42, "x").unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[1], "test,HR,10,0.666667,3,42");
    }
}
