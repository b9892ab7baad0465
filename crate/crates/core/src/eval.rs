//! Full-ranking top-K evaluation with training-item masking.

use std::io::Write;

use rayon::prelude::*;

use crate::encoder::NodeTables;
use crate::error::{Error, Result};
use crate::gauss::w2_squared_sd;
use crate::graph::{InteractionGraph, InteractionSet};

/// Ranked items of one user, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    pub items: Vec<u32>,
    pub scores: Vec<f64>,
    /// Fewer than K unmasked items were available.
    pub short: bool,
}

/// Selects the `k` best items by score, skipping `masked` (sorted ascending).
/// Ties go to the lower item id.
pub fn top_k_from_scores(scores: &[f64], masked: &[u32], k: usize) -> TopK {
    let mut cand: Vec<u32> = (0..scores.len() as u32)
        .filter(|i| masked.binary_search(i).is_err())
        .collect();
    let order = |a: &u32, b: &u32| {
        scores[*b as usize]
            .total_cmp(&scores[*a as usize])
            .then(a.cmp(b))
    };
    let short = cand.len() < k;
    if !short && k > 0 {
        cand.select_nth_unstable_by(k - 1, order);
    }
    cand.truncate(k);
    cand.sort_unstable_by(order);
    TopK {
        scores: cand.iter().map(|&i| scores[i as usize]).collect(),
        items: cand,
        short,
    }
}

/// Precomputed standard deviations so scoring a user touches each item once.
#[derive(Debug, Clone)]
pub struct Scorer<'a> {
    tables: &'a NodeTables,
    sd: ndarray::Array2<f64>,
    num_users: usize,
}

impl<'a> Scorer<'a> {
    pub fn new(tables: &'a NodeTables, num_users: usize) -> Self {
        Self {
            tables,
            sd: tables.variance.mapv(f64::sqrt),
            num_users,
        }
    }

    pub fn num_items(&self) -> usize {
        self.tables.num_nodes() - self.num_users
    }

    /// `−W2²(user, item)` for every item.
    pub fn scores(&self, user: u32) -> Vec<f64> {
        let u = user as usize;
        let mu = self.tables.mean.row(u);
        let su = self.sd.row(u);
        let (mu, su) = (mu.as_slice().unwrap(), su.as_slice().unwrap());
        (self.num_users..self.tables.num_nodes())
            .map(|n| {
                -w2_squared_sd(
                    mu,
                    su,
                    self.tables.mean.row(n).as_slice().unwrap(),
                    self.sd.row(n).as_slice().unwrap(),
                )
            })
            .collect()
    }
}

pub fn rank_items(user: u32, tables: &NodeTables, graph: &InteractionGraph, k: usize) -> TopK {
    let scorer = Scorer::new(tables, graph.num_users());
    top_k_from_scores(&scorer.scores(user), graph.user_items(user), k)
}

/// Hit fraction of the test items; `None` for an empty test set.
pub fn recall_at_k(topk: &[u32], test_items: &[u32]) -> Option<f64> {
    if test_items.is_empty() {
        return None;
    }
    let hits = topk.iter().filter(|i| test_items.contains(i)).count();
    Some(hits as f64 / test_items.len() as f64)
}

/// Binary-relevance NDCG with `log₂(rank + 1)` discounting.
pub fn ndcg_at_k(topk: &[u32], test_items: &[u32], k: usize) -> Option<f64> {
    if test_items.is_empty() {
        return None;
    }
    let dcg: f64 = topk
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| test_items.contains(i))
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..k.min(test_items.len())).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    Some(if idcg > 0.0 { dcg / idcg } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserMetrics {
    pub user: u32,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub per_user: Vec<UserMetrics>,
    /// Users whose ranking came up short of K.
    pub short_lists: usize,
}

impl EvalReport {
    pub fn write_per_user_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "user_id,recall,ndcg")?;
        for m in &self.per_user {
            writeln!(out, "{},{},{}", m.user, m.recall, m.ndcg)?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        format!(
            "users={} recall@{k}={:.6} ndcg@{k}={:.6}",
            self.per_user.len(),
            self.recall,
            self.ndcg,
            k = self.k
        )
    }
}

/// Evaluates an arbitrary per-user scoring function over all items.
pub fn evaluate_scores<F>(score: F, graph: &InteractionGraph, test: &InteractionSet, k: usize) -> Result<EvalReport>
where
    F: Fn(u32) -> Vec<f64> + Sync,
{
    if k == 0 {
        return Err(Error::invalid("k", "must be positive"));
    }
    let mut test_items = test.items_by_user();
    test_items.resize(graph.num_users(), Vec::new());
    let users: Vec<u32> = (0..graph.num_users() as u32)
        .filter(|&u| !test_items[u as usize].is_empty())
        .collect();
    if users.is_empty() {
        return Err(Error::NoEvaluableUsers);
    }
    let rows: Vec<(UserMetrics, bool)> = users
        .par_iter()
        .map(|&u| {
            let scores = score(u);
            let top = top_k_from_scores(&scores, graph.user_items(u), k);
            let t = &test_items[u as usize];
            let m = UserMetrics {
                user: u,
                recall: recall_at_k(&top.items, t).unwrap_or(0.0),
                ndcg: ndcg_at_k(&top.items, t, k).unwrap_or(0.0),
            };
            (m, top.short)
        })
        .collect();
    let n = rows.len() as f64;
    let per_user: Vec<UserMetrics> = rows.iter().map(|r| r.0).collect();
    Ok(EvalReport {
        k,
        recall: per_user.iter().map(|m| m.recall).sum::<f64>() / n,
        ndcg: per_user.iter().map(|m| m.ndcg).sum::<f64>() / n,
        short_lists: rows.iter().filter(|r| r.1).count(),
        per_user,
    })
}

/// Ranks by `−W2²` between final user and item embeddings.
pub fn evaluate_all(tables: &NodeTables, graph: &InteractionGraph, test: &InteractionSet, k: usize) -> Result<EvalReport> {
    if tables.num_nodes() != graph.num_nodes() {
        return Err(Error::DimensionMismatch {
            left: tables.num_nodes(),
            right: graph.num_nodes(),
        });
    }
    let scorer = Scorer::new(tables, graph.num_users());
    evaluate_scores(|u| scorer.scores(u), graph, test, k)
}

/// Item training degree as the score for every user.
pub fn popularity_baseline(graph: &InteractionGraph, test: &InteractionSet, k: usize) -> Result<EvalReport> {
    let pop: Vec<f64> = (0..graph.num_items() as u32)
        .map(|i| graph.item_users(i).len() as f64)
        .collect();
    evaluate_scores(|_| pop.clone(), graph, test, k)
}
