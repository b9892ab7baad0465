//! The bipartite user–item interaction graph: k-core filtering, per-user
//! train/test splitting, and adjacency construction.
//!
//! Node numbering in the joint space puts users at `[0, num_users)` and items
//! at `[num_users, num_users + num_items)`.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sparse::SparsePattern;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub timestamp: i64,
}

impl Interaction {
    pub fn new(user: u32, item: u32) -> Self {
        Self {
            user,
            item,
            timestamp: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Test,
    /// Not yet split.
    All,
}

/// A list of interactions over a fixed id space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionSet {
    pub num_users: usize,
    pub num_items: usize,
    pub records: Vec<Interaction>,
    pub role: Role,
}

impl InteractionSet {
    pub fn new(num_users: usize, num_items: usize, records: Vec<Interaction>, role: Role) -> Self {
        Self {
            num_users,
            num_items,
            records,
            role,
        }
    }

    /// Convenience constructor from `(user, item)` pairs; counts are inferred.
    pub fn from_pairs(pairs: &[(u32, u32)]) -> Self {
        let num_users = pairs.iter().map(|p| p.0 as usize + 1).max().unwrap_or(0);
        let num_items = pairs.iter().map(|p| p.1 as usize + 1).max().unwrap_or(0);
        let records = pairs.iter().map(|&(u, i)| Interaction::new(u, i)).collect();
        Self::new(num_users, num_items, records, Role::All)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn pairs(&self) -> Vec<(u32, u32)> {
        self.records.iter().map(|r| (r.user, r.item)).collect()
    }

    /// Items per user, sorted and deduplicated.
    pub fn items_by_user(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.num_users];
        for r in &self.records {
            out[r.user as usize].push(r.item);
        }
        for v in &mut out {
            v.sort_unstable();
            v.dedup();
        }
        out
    }

    /// Drops repeated `(user, item)` pairs, keeping the first occurrence.
    pub fn dedup(&self) -> (Self, usize) {
        let mut seen = HashSet::with_capacity(self.records.len());
        let records: Vec<_> = self
            .records
            .iter()
            .copied()
            .filter(|r| seen.insert((r.user, r.item)))
            .collect();
        let dropped = self.records.len() - records.len();
        (
            Self::new(self.num_users, self.num_items, records, self.role),
            dropped,
        )
    }
}

/// Result of [`k_core_filter`]: the surviving interactions plus the edge count
/// after each peeling pass.
#[derive(Debug, Clone)]
pub struct CoreOutcome {
    pub interactions: InteractionSet,
    pub trace: Vec<usize>,
}

/// Iteratively drops users and items with fewer than `k` interactions until
/// every survivor meets the bound. Ids are left untouched; see [`reindex`].
pub fn k_core_filter(interactions: &InteractionSet, k: usize) -> Result<CoreOutcome> {
    if k == 0 {
        return Err(Error::invalid("k", "k-core order must be at least 1"));
    }
    let (mut current, _) = interactions.dedup();
    let mut trace = vec![current.len()];
    loop {
        let mut user_deg = vec![0usize; current.num_users];
        let mut item_deg = vec![0usize; current.num_items];
        for r in &current.records {
            user_deg[r.user as usize] += 1;
            item_deg[r.item as usize] += 1;
        }
        let before = current.records.len();
        current
            .records
            .retain(|r| user_deg[r.user as usize] >= k && item_deg[r.item as usize] >= k);
        if current.records.len() == before {
            break;
        }
        trace.push(current.records.len());
    }
    if current.is_empty() {
        log::warn!("{k}-core filtering removed every interaction");
    }
    Ok(CoreOutcome {
        interactions: current,
        trace,
    })
}

/// Dense re-indexing of the ids that actually occur. Returns the compacted set
/// and, for each new id, the old id it came from.
pub fn reindex(interactions: &InteractionSet) -> (InteractionSet, Vec<u32>, Vec<u32>) {
    let mut user_map = vec![u32::MAX; interactions.num_users];
    let mut item_map = vec![u32::MAX; interactions.num_items];
    let mut used_users = vec![false; interactions.num_users];
    let mut used_items = vec![false; interactions.num_items];
    for r in &interactions.records {
        used_users[r.user as usize] = true;
        used_items[r.item as usize] = true;
    }
    let mut users = Vec::new();
    for (old, _) in used_users.iter().enumerate().filter(|(_, &u)| u) {
        user_map[old] = users.len() as u32;
        users.push(old as u32);
    }
    let mut items = Vec::new();
    for (old, _) in used_items.iter().enumerate().filter(|(_, &u)| u) {
        item_map[old] = items.len() as u32;
        items.push(old as u32);
    }
    let records = interactions
        .records
        .iter()
        .map(|r| Interaction {
            user: user_map[r.user as usize],
            item: item_map[r.item as usize],
            timestamp: r.timestamp,
        })
        .collect();
    (
        InteractionSet::new(users.len(), items.len(), records, interactions.role),
        users,
        items,
    )
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: InteractionSet,
    pub test: InteractionSet,
    /// Users with a single interaction: kept in train, absent from evaluation.
    pub non_evaluable: Vec<u32>,
}

/// Per-user random split: `⌈ratio·n⌉` interactions go to train, capped so that
/// any user with at least two interactions keeps one for test.
pub fn split_interactions(interactions: &InteractionSet, ratio: f64, seed: u64) -> Result<Split> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid("ratio", format!("must lie in (0, 1), got {ratio}")));
    }
    let mut by_user: Vec<Vec<Interaction>> = vec![Vec::new(); interactions.num_users];
    for r in &interactions.records {
        by_user[r.user as usize].push(*r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut non_evaluable = Vec::new();
    for (user, mut recs) in by_user.into_iter().enumerate() {
        if recs.is_empty() {
            continue;
        }
        recs.sort_unstable();
        recs.shuffle(&mut rng);
        let n = recs.len();
        let n_train = if n == 1 {
            non_evaluable.push(user as u32);
            1
        } else {
            ((ratio * n as f64).ceil() as usize).clamp(1, n - 1)
        };
        test.extend_from_slice(&recs[n_train..]);
        recs.truncate(n_train);
        train.extend(recs);
    }
    train.sort_unstable();
    test.sort_unstable();
    let (nu, ni) = (interactions.num_users, interactions.num_items);
    Ok(Split {
        train: InteractionSet::new(nu, ni, train, Role::Train),
        test: InteractionSet::new(nu, ni, test, Role::Test),
        non_evaluable,
    })
}

/// Undirected bipartite graph built from training interactions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionGraph {
    num_users: usize,
    num_items: usize,
    user_neighbors: Vec<Vec<u32>>,
    item_neighbors: Vec<Vec<u32>>,
    num_edges: usize,
}

pub fn build_graph(train: &InteractionSet) -> Result<InteractionGraph> {
    let mut user_neighbors = vec![Vec::new(); train.num_users];
    let mut item_neighbors = vec![Vec::new(); train.num_items];
    for r in &train.records {
        let (u, i) = (r.user as usize, r.item as usize);
        if u >= train.num_users || i >= train.num_items {
            return Err(Error::Contract(format!(
                "edge ({u}, {i}) outside id space {}x{}",
                train.num_users, train.num_items
            )));
        }
        user_neighbors[u].push(r.item);
        item_neighbors[i].push(r.user);
    }
    let mut duplicates = 0;
    for list in user_neighbors.iter_mut().chain(item_neighbors.iter_mut()) {
        list.sort_unstable();
        let before = list.len();
        list.dedup();
        duplicates += before - list.len();
    }
    if duplicates > 0 {
        log::info!("dropped {} duplicate training edges", duplicates / 2);
    }
    let num_edges = user_neighbors.iter().map(Vec::len).sum();
    Ok(InteractionGraph {
        num_users: train.num_users,
        num_items: train.num_items,
        user_neighbors,
        item_neighbors,
        num_edges,
    })
}

impl InteractionGraph {
    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    pub fn user_items(&self, user: u32) -> &[u32] {
        &self.user_neighbors[user as usize]
    }

    pub fn item_users(&self, item: u32) -> &[u32] {
        &self.item_neighbors[item as usize]
    }

    pub fn has_edge(&self, user: u32, item: u32) -> bool {
        self.user_neighbors[user as usize].binary_search(&item).is_ok()
    }

    /// Joint-space id of an item.
    #[inline]
    pub fn item_node(&self, item: u32) -> u32 {
        self.num_users as u32 + item
    }

    /// Degrees in the joint node space.
    pub fn degrees(&self) -> Vec<usize> {
        self.user_neighbors
            .iter()
            .chain(&self.item_neighbors)
            .map(Vec::len)
            .collect()
    }

    /// Symmetric adjacency over the joint node space, neighbor ids ascending.
    pub fn adjacency(&self) -> SparsePattern {
        let offset = self.num_users as u32;
        let user_rows = self
            .user_neighbors
            .iter()
            .map(|items| items.iter().map(|&i| i + offset).collect::<Vec<_>>());
        let item_rows = self.item_neighbors.iter().cloned();
        SparsePattern::from_rows(user_rows.chain(item_rows))
    }

    /// All edges as `(user, item)`, grouped by user.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        self.user_neighbors
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u as u32, i)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn three_edge_graph_collapses_at_k2() {
        // i2 drops, then u1, then i1, then u2.
        let set = InteractionSet::from_pairs(&[(0, 0), (0, 1), (1, 0)]);
        let out = k_core_filter(&set, 2).unwrap();
        assert!(out.interactions.is_empty());
        assert_eq!(out.trace.first(), Some(&3));
        assert_eq!(out.trace.last(), Some(&0));
    }

    #[test]
    fn complete_bipartite_survives_its_own_core() {
        let pairs: Vec<_> = (0..5).flat_map(|u| (0..5).map(move |i| (u, i))).collect();
        let set = InteractionSet::from_pairs(&pairs);
        let out = k_core_filter(&set, 5).unwrap();
        assert_eq!(out.interactions.records, set.records);
        let out = k_core_filter(&set, 6).unwrap();
        assert!(out.interactions.is_empty());
    }

    #[test]
    fn one_core_is_identity() {
        let set = InteractionSet::from_pairs(&[(0, 3), (2, 1), (1, 1)]);
        assert_eq!(k_core_filter(&set, 1).unwrap().interactions.records, set.records);
        assert!(k_core_filter(&set, 0).is_err());
    }

    #[test]
    fn split_counts_follow_ceiling_rule() {
        let pairs: Vec<_> = (0..10).map(|i| (0, i)).chain([(1, 3)]).collect();
        let set = InteractionSet::from_pairs(&pairs);
        let split = split_interactions(&set, 0.8, 7).unwrap();
        let n0 = |s: &InteractionSet| s.records.iter().filter(|r| r.user == 0).count();
        assert_eq!(n0(&split.train), 8);
        assert_eq!(n0(&split.test), 2);
        assert_eq!(split.non_evaluable, vec![1]);
        assert!(split.test.records.iter().all(|r| r.user != 1));
        let again = split_interactions(&set, 0.8, 7).unwrap();
        assert_eq!(split.train, again.train);
        assert_eq!(split.test, again.test);
    }

    #[test]
    fn two_item_user_keeps_one_for_test() {
        let set = InteractionSet::from_pairs(&[(0, 0), (0, 1)]);
        let split = split_interactions(&set, 0.99, 1).unwrap();
        assert_eq!(split.train.len(), 1);
        assert_eq!(split.test.len(), 1);
        assert!(split_interactions(&set, 1.0, 1).is_err());
    }

    #[test]
    fn graph_from_train_edges() {
        let mut set = InteractionSet::from_pairs(&[(0, 0), (0, 2), (1, 1), (0, 0)]);
        set.num_items = 4;
        let g = build_graph(&set).unwrap();
        assert_eq!(g.num_edges(), 3);
        assert_eq!(g.user_items(0), &[0, 2]);
        assert_eq!(g.item_users(3), &[] as &[u32]);
        assert_eq!(g.item_node(0), 2);
        let adj = g.adjacency();
        assert_eq!(adj.num_rows(), 6);
        assert_eq!(adj.row(0), &[2, 4]);
        assert_eq!(adj.row(2), &[0]);
        assert_eq!(adj.nnz(), 6);
    }

    fn random_set() -> impl Strategy<Value = InteractionSet> {
        prop::collection::vec((0u32..12, 0u32..15), 0..120).prop_map(|pairs| {
            let mut s = InteractionSet::from_pairs(&pairs);
            s.num_users = 12;
            s.num_items = 15;
            s
        })
    }

    proptest! {
        #[test]
        fn k_core_is_idempotent_with_min_degree(set in random_set(), k in 1usize..5) {
            let once = k_core_filter(&set, k).unwrap().interactions;
            let twice = k_core_filter(&once, k).unwrap().interactions;
            prop_assert_eq!(&once.records, &twice.records);
            let g = build_graph(&once).unwrap();
            for d in g.degrees() {
                prop_assert!(d == 0 || d >= k);
            }
        }

        #[test]
        fn split_partitions_the_set(set in random_set(), seed in 0u64..1000) {
            let (set, _) = set.dedup();
            let split = split_interactions(&set, 0.8, seed).unwrap();
            prop_assert_eq!(split.train.len() + split.test.len(), set.len());
            let train: HashSet<_> = split.train.pairs().into_iter().collect();
            prop_assert!(split.test.pairs().iter().all(|p| !train.contains(p)));
            let g = build_graph(&split.train).unwrap();
            prop_assert_eq!(g.num_edges(), split.train.len());
            for u in 0..set.num_users as u32 {
                let total = set.records.iter().filter(|r| r.user == u).count();
                if total >= 2 {
                    prop_assert!(!g.user_items(u).is_empty());
                    prop_assert!(split.test.records.iter().any(|r| r.user == u));
                }
            }
        }

        #[test]
        fn adjacency_is_symmetric(set in random_set()) {
            let g = build_graph(&set).unwrap();
            let adj = g.adjacency();
            for v in 0..adj.num_rows() {
                for &w in adj.row(v) {
                    prop_assert!(adj.row(w as usize).binary_search(&(v as u32)).is_ok());
                    prop_assert!((v < g.num_users()) != ((w as usize) < g.num_users()));
                }
            }
        }
    }
}
