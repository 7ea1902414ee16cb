//! Full-catalog ranking of the target task and the HR@K / NDCG@K metrics.
//!
//! For each test user, every item the user has not interacted with under
//! the target behavior in training is scored, plus the held-out item. Ties
//! break by ascending item id, which makes ranks (and therefore metrics)
//! reproducible bit for bit regardless of the worker count. Per-user
//! scalars reduce to means in user-id order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::Result;
use crate::model::Scorer;

pub const DEFAULT_K: usize = 10;

/// Rank of one user's held-out item among the candidates (1-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankResult {
    pub user: u32,
    pub rank: usize,
    pub candidates: usize,
}

/// Score the candidate catalog for one test user and locate the held-out
/// item. Items observed under the target behavior in training are not
/// candidates; auxiliary-behavior items stay in unless `exclude_aux` is
/// set (the held-out item is always ranked).
pub fn rank_items(
    scorer: &Scorer,
    excluded_per_user: &[Vec<u32>],
    user: u32,
    held_item: u32,
    exclude_aux: bool,
    aux_excluded: &[Vec<u32>],
) -> RankResult {
    let excluded = &excluded_per_user[user as usize];
    let aux = if exclude_aux { Some(&aux_excluded[user as usize]) } else { None };
    let held_score = scorer.score(user as usize, held_item as usize);

    let mut better = 0usize;
    let mut tied_smaller_id = 0usize;
    let mut candidates = 1usize;
    for item in 0..scorer.num_items() as u32 {
        if item == held_item {
            continue;
        }
        if excluded.binary_search(&item).is_ok() {
            continue;
        }
        if let Some(aux) = aux {
            if aux.binary_search(&item).is_ok() {
                continue;
            }
        }
        candidates += 1;
        let score = scorer.score(user as usize, item as usize);
        if score > held_score {
            better += 1;
        } else if score == held_score && item < held_item {
            tied_smaller_id += 1;
        }
    }
    RankResult { user, rank: 1 + better + tied_smaller_id, candidates }
}

/// HR@K and NDCG@K over rank results: the hit indicator mean and the mean
/// of `1 / log2(rank + 1)` for ranks within K, both taken in user-id order.
pub fn hr_ndcg(results: &[RankResult], k: usize) -> (f64, f64) {
    debug_assert!(results.windows(2).all(|w| w[0].user <= w[1].user));
    let mut hits = 0.0;
    let mut gain = 0.0;
    for r in results {
        if r.rank <= k {
            hits += 1.0;
            gain += 1.0 / ((r.rank as f64) + 1.0).log2();
        }
    }
    let n = results.len() as f64;
    (hits / n, gain / n)
}

/// Evaluate a frozen scorer over the whole test set. `threads > 1` splits
/// the per-user work across a local pool; results collect in input order,
/// so the metrics do not depend on the worker count.
pub fn evaluate(
    scorer: &Scorer,
    split: &Split,
    k: usize,
    threads: usize,
    exclude_aux: bool,
) -> (f64, f64, Vec<RankResult>) {
    let target = split.train.target_behavior();
    let excluded: Vec<Vec<u32>> = split.train.adjacency(target);
    let aux_excluded: Vec<Vec<u32>> = if exclude_aux {
        let mut merged = vec![Vec::new(); split.train.user_count];
        for b in 0..split.train.num_behaviors() - 1 {
            for &(u, v) in &split.train.edges[b] {
                merged[u as usize].push(v);
            }
        }
        for items in &mut merged {
            items.sort_unstable();
            items.dedup();
        }
        merged
    } else {
        vec![Vec::new(); split.train.user_count]
    };

    let rank_one = |pair: &crate::data::TestPair| {
        rank_items(scorer, &excluded, pair.user, pair.item, exclude_aux, &aux_excluded)
    };

    let mut results: Vec<RankResult> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("evaluation pool");
        pool.install(|| split.test.par_iter().map(rank_one).collect())
    } else {
        split.test.iter().map(rank_one).collect()
    };
    results.sort_by_key(|r| r.user);
    let (hr, ndcg) = hr_ndcg(&results, k);
    (hr, ndcg, results)
}

// ---- metrics report ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub hr10: f64,
    pub ndcg10: f64,
}

/// Structured metrics document: dataset and config identifiers, per-seed
/// values, and the mean over seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format: String,
    pub dataset_hash: String,
    pub config_hash: String,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedMetrics>,
    pub mean_hr10: f64,
    pub mean_ndcg10: f64,
}

impl MetricsReport {
    pub fn from_runs(
        dataset_hash: &str,
        config_hash: &str,
        k: usize,
        per_seed: Vec<SeedMetrics>,
    ) -> Self {
        let n = per_seed.len() as f64;
        let mut hr = 0.0;
        let mut ndcg = 0.0;
        for m in &per_seed {
            hr += m.hr10;
            ndcg += m.ndcg10;
        }
        MetricsReport {
            format: "copf-metrics/v1".to_string(),
            dataset_hash: dataset_hash.to_string(),
            config_hash: config_hash.to_string(),
            k,
            seeds: per_seed.iter().map(|m| m.seed).collect(),
            per_seed,
            mean_hr10: hr / n,
            mean_ndcg10: ndcg / n,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Human-readable table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:>8} {:>10} {:>10}\n", "seed", "HR@10", "NDCG@10"));
        for m in &self.per_seed {
            out.push_str(&format!("{:>8} {:>10.4} {:>10.4}\n", m.seed, m.hr10, m.ndcg10));
        }
        out.push_str(&format!(
            "{:>8} {:>10.4} {:>10.4}\n",
            "mean", self.mean_hr10, self.mean_ndcg10
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(user: u32, rank: usize) -> RankResult {
        RankResult { user, rank, candidates: 100 }
    }

    #[test]
    fn closed_form_metric_values() {
        let (hr, ndcg) = hr_ndcg(&[result(0, 1)], 10);
        assert_eq!(hr, 1.0);
        assert_eq!(ndcg, 1.0);

        let (hr, ndcg) = hr_ndcg(&[result(0, 11)], 10);
        assert_eq!(hr, 0.0);
        assert_eq!(ndcg, 0.0);

        let (_, ndcg) = hr_ndcg(&[result(0, 3)], 10);
        assert_eq!(ndcg, 0.5); // 1 / log2(4)
    }

    #[test]
    fn metrics_stay_in_bounds_and_ndcg_at_most_hr() {
        let results: Vec<RankResult> = (0..20).map(|u| result(u, (u as usize) + 1)).collect();
        let (hr, ndcg) = hr_ndcg(&results, 10);
        assert!((0.0..=1.0).contains(&hr));
        assert!((0.0..=1.0).contains(&ndcg));
        assert!(ndcg <= hr);
    }

    #[test]
    fn report_means_over_seeds() {
        let report = MetricsReport::from_runs(
            "d",
            "c",
            10,
            vec![
                SeedMetrics { seed: 1, hr10: 0.2, ndcg10: 0.1 },
                SeedMetrics { seed: 2, hr10: 0.4, ndcg10: 0.3 },
            ],
        );
        assert!((report.mean_hr10 - 0.3).abs() < 1e-15);
        assert!((report.mean_ndcg10 - 0.2).abs() < 1e-15);
    }
}
