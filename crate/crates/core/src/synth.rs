//! Seeded synthetic interaction logs for tests, benchmarks and smoke runs.

use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Interaction, InteractionLog};
use crate::error::Result;

fn log_from_sequences(seqs: &[Vec<usize>]) -> InteractionLog {
    let records = seqs
        .iter()
        .enumerate()
        .flat_map(|(u, s)| {
            s.iter().enumerate().map(move |(t, &i)| Interaction {
                user: format!("u{u}"),
                item: format!("i{i}"),
                timestamp: t as i64,
            })
        })
        .collect();
    InteractionLog { records, rejected: vec![] }
}

/// `user<TAB>item<TAB>timestamp` lines, the `tsv` input format.
pub fn to_tsv(log: &InteractionLog) -> String {
    let mut out = String::new();
    for r in &log.records {
        writeln!(out, "{}\t{}\t{}", r.user, r.item, r.timestamp).unwrap();
    }
    out
}

/// Uniform random sequences whose lengths lie in `lengths`, redrawn until
/// every one of `num_items` items occurs.
fn uniform_log(num_users: usize, num_items: usize, lengths: std::ops::RangeInclusive<usize>, seed: u64) -> InteractionLog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let seqs: Vec<Vec<usize>> = (0..num_users)
            .map(|_| {
                let n = rng.random_range(lengths.clone());
                (0..n).map(|_| rng.random_range(0..num_items)).collect()
            })
            .collect();
        let mut seen = vec![false; num_items];
        seqs.iter().flatten().for_each(|&i| seen[i] = true);
        if seen.iter().all(|&s| s) {
            return log_from_sequences(&seqs);
        }
    }
}

/// 8 users and 12 items with nine interactions each, so every train input
/// has six items.
pub fn micro_log(seed: u64) -> InteractionLog {
    uniform_log(8, 12, 9..=9, seed)
}

/// 32 users and 50 items with 8 to 14 interactions each.
pub fn overfit_log(seed: u64) -> InteractionLog {
    uniform_log(32, 50, 8..=14, seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedConfig {
    pub num_users: usize,
    pub num_clusters: usize,
    pub cluster_size: usize,
    /// Globally popular items inserted at random positions.
    pub num_head: usize,
    pub head_prob: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            num_users: 400,
            num_clusters: 20,
            cluster_size: 12,
            num_head: 10,
            head_prob: 0.15,
            min_len: 8,
            max_len: 14,
        }
    }
}

/// Strides coprime with `n`, excluding 0.
fn coprime_strides(n: usize) -> Vec<usize> {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    (1..n).filter(|&s| gcd(s, n) == 1).collect()
}

/// Every user walks one item cluster with a fixed stride from a random
/// offset, so the next cluster item is a periodic function of the position.
/// Head items interrupt the walk with probability `head_prob`, drawn with
/// weights `1/(rank + 1)`. Walks never revisit a cluster item.
pub fn planted_log(cfg: &PlantedConfig, seed: u64) -> InteractionLog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let strides = coprime_strides(cfg.cluster_size);
    let head_weights: Vec<f64> = (0..cfg.num_head).map(|r| 1.0 / (r + 1) as f64).collect();
    let head_total: f64 = head_weights.iter().sum();
    let seqs: Vec<Vec<usize>> = (0..cfg.num_users)
        .map(|_| {
            let c = rng.random_range(0..cfg.num_clusters);
            let offset = rng.random_range(0..cfg.cluster_size);
            let stride = *strides.choose(&mut rng).unwrap_or(&1);
            let n = rng.random_range(cfg.min_len..=cfg.max_len);
            let mut seq = Vec::with_capacity(n);
            let mut step = 0;
            while seq.len() < n {
                if step < cfg.cluster_size && rng.random_bool(1.0 - cfg.head_prob) {
                    seq.push(cfg.num_head + c * cfg.cluster_size + (offset + step * stride) % cfg.cluster_size);
                    step += 1;
                } else if cfg.num_head > 0 {
                    let mut x = rng.random_range(0.0..head_total);
                    let mut h = 0;
                    while h + 1 < cfg.num_head && x >= head_weights[h] {
                        x -= head_weights[h];
                        h += 1;
                    }
                    seq.push(h);
                } else {
                    break;
                }
            }
            seq
        })
        .collect();
    log_from_sequences(&seqs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StandInConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub cluster_size: usize,
    /// Probability that an interaction comes from the user's own clusters.
    pub affinity: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for StandInConfig {
    /// Shape of the LastFM listening log: 1,090 users, 3,646 items, mean
    /// sequence length near 48.
    fn default() -> Self {
        Self {
            num_users: 1090,
            num_items: 3646,
            cluster_size: 40,
            affinity: 0.7,
            min_len: 20,
            max_len: 77,
        }
    }
}

/// Users prefer two item clusters and otherwise draw from a Zipf-like
/// global popularity. Within a cluster the user drifts forward through a
/// randomly permuted item order, so neighbours in time tend to be
/// neighbours in that order.
pub fn standin_log(cfg: &StandInConfig, seed: u64) -> InteractionLog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..cfg.num_items).collect();
    order.shuffle(&mut rng);
    let clusters: Vec<&[usize]> = order.chunks(cfg.cluster_size).collect();
    let mut pop: Vec<usize> = (0..cfg.num_items).collect();
    pop.shuffle(&mut rng);
    let cumulative: Vec<f64> = (0..cfg.num_items)
        .scan(0.0, |acc, r| {
            *acc += 1.0 / (r + 1) as f64;
            Some(*acc)
        })
        .collect();
    let total = *cumulative.last().unwrap_or(&1.0);
    let seqs: Vec<Vec<usize>> = (0..cfg.num_users)
        .map(|_| {
            let own = [rng.random_range(0..clusters.len()), rng.random_range(0..clusters.len())];
            let mut cursor = [rng.random_range(0..cfg.cluster_size), rng.random_range(0..cfg.cluster_size)];
            let n = rng.random_range(cfg.min_len..=cfg.max_len);
            (0..n)
                .map(|_| {
                    if rng.random_bool(cfg.affinity) {
                        let k = rng.random_range(0..2);
                        let cl = clusters[own[k]];
                        cursor[k] = (cursor[k] + rng.random_range(1..=2)) % cl.len();
                        cl[cursor[k]]
                    } else {
                        let x = rng.random_range(0.0..total);
                        pop[cumulative.partition_point(|&c| c <= x).min(cfg.num_items - 1)]
                    }
                })
                .collect()
        })
        .collect();
    log_from_sequences(&seqs)
}

/// The micro dataset used for gradient checks.
pub fn micro_dataset(seed: u64) -> Result<Dataset> {
    crate::data::prepare(&micro_log(seed), 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_shape() {
        let ds = micro_dataset(7).unwrap();
        assert_eq!((ds.num_users(), ds.num_items()), (8, 12));
        assert!((0..8).all(|u| ds.train_input(u).len() == 6));
    }

    #[test]
    fn planted_walks_do_not_repeat_cluster_items() {
        let cfg = PlantedConfig::default();
        let log = planted_log(&cfg, 1);
        let again = planted_log(&cfg, 1);
        assert_eq!(log.records, again.records);
        let mut by_user: std::collections::HashMap<&str, Vec<&str>> = Default::default();
        for r in &log.records {
            by_user.entry(&r.user).or_default().push(&r.item);
        }
        for items in by_user.values() {
            let cluster: Vec<&&str> = items.iter().filter(|i| i[1..].parse::<usize>().unwrap() >= cfg.num_head).collect();
            let mut dedup = cluster.clone();
            dedup.sort();
            dedup.dedup();
            assert_eq!(dedup.len(), cluster.len());
        }
    }

    #[test]
    fn standin_matches_target_scale() {
        let log = standin_log(&StandInConfig::default(), 3);
        let ds = crate::data::prepare(&log, 1).unwrap();
        assert_eq!(ds.num_users(), 1090);
        assert!(ds.num_items() > 3500, "{}", ds.num_items());
        assert!((ds.stats.avg_length - 48.2).abs() < 2.0, "{}", ds.stats.avg_length);
    }
}
