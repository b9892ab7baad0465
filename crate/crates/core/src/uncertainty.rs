//! Uncertainty analyses over learned variances: variance against user
//! activity, top-K category diversity, variance against item label count,
//! and the loss-curve oscillation statistic.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;

use crate::encoder::NodeTables;
use crate::error::{Error, Result};
use crate::eval::{top_k_from_scores, Scorer};
use crate::graph::InteractionGraph;
use crate::losses::LossKind;
use crate::trainer::{train_on_graph, TrainConfig};

/// Category labels per dense item id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CategoryTable {
    labels: Vec<Option<BTreeSet<String>>>,
}

impl CategoryTable {
    /// Builds from labels keyed by item token, keeping only items present in
    /// `item_index`. Returns the table and the number of dropped entries.
    pub fn from_tokens(by_token: &BTreeMap<String, BTreeSet<String>>, item_index: &HashMap<&str, u32>) -> (Self, usize) {
        let mut labels = vec![None; item_index.len()];
        let mut dropped = 0;
        for (token, set) in by_token {
            match item_index.get(token.as_str()) {
                Some(&i) if !set.is_empty() => labels[i as usize] = Some(set.clone()),
                _ => dropped += 1,
            }
        }
        if dropped > 0 {
            log::info!("dropped {dropped} category entries for items outside the dataset");
        }
        (Self { labels }, dropped)
    }

    pub fn from_labels(labels: Vec<Option<BTreeSet<String>>>) -> Self {
        Self { labels }
    }

    pub fn num_items(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self, item: u32) -> Option<&BTreeSet<String>> {
        self.labels.get(item as usize).and_then(Option::as_ref)
    }

    pub fn labeled_items(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

/// How a variance vector is reduced to one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceSummary {
    /// Euclidean norm of the variance vector.
    #[default]
    L2Norm,
    /// Arithmetic mean of the variance entries.
    EntryMean,
}

pub fn variance_norm(variance: &[f64]) -> f64 {
    variance.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn summarize_variance(variance: &[f64], how: VarianceSummary) -> f64 {
    match how {
        VarianceSummary::L2Norm => variance_norm(variance),
        VarianceSummary::EntryMean if variance.is_empty() => 0.0,
        VarianceSummary::EntryMean => variance.iter().sum::<f64>() / variance.len() as f64,
    }
}

/// Mean of a value over one group.
#[derive(Debug, Clone, PartialEq)]
pub struct Bucket {
    pub label: String,
    pub count: usize,
    pub mean: Option<f64>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub const DEFAULT_O1_EDGES: [f64; 4] = [1.0, 1.5, 2.0, 2.5];

/// Groups users by `log₁₀(interaction count)` at the given ascending edges
/// and averages `values` per group. `n` edges give `n + 1` buckets.
pub fn group_by_o1(values: &[f64], counts: &[usize], edges: &[f64]) -> Result<Vec<Bucket>> {
    if values.len() != counts.len() {
        return Err(Error::DimensionMismatch {
            left: values.len(),
            right: counts.len(),
        });
    }
    if edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("bucket_edges", "must be strictly ascending"));
    }
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); edges.len() + 1];
    for (&v, &c) in values.iter().zip(counts) {
        let o1 = (c as f64).log10();
        groups[edges.partition_point(|&e| e <= o1)].push(v);
    }
    let fmt = |x: f64| format!("{x:.1}");
    Ok(groups
        .iter()
        .enumerate()
        .map(|(b, g)| {
            let lo = if b == 0 { "0.0".to_string() } else { fmt(edges[b - 1]) };
            let hi = if b == edges.len() { "inf".to_string() } else { fmt(edges[b]) };
            Bucket {
                label: format!("{lo}~{hi}"),
                count: g.len(),
                mean: mean(g),
            }
        })
        .collect())
}

/// `1 − (2/(K(K−1))) Σ_{i<j} I_ij` where `I_ij` is 1 when the label sets of
/// items i and j intersect. Unlabeled items are skipped; `None` when fewer
/// than two labeled items remain.
pub fn o2_diversity(topk: &[u32], categories: &CategoryTable) -> Option<f64> {
    let labeled: Vec<&BTreeSet<String>> = topk.iter().filter_map(|&i| categories.labels(i)).collect();
    let k = labeled.len();
    if k < 2 {
        return None;
    }
    let mut same = 0usize;
    for a in 0..k {
        for b in a + 1..k {
            if !labeled[a].is_disjoint(labeled[b]) {
                same += 1;
            }
        }
    }
    Some(1.0 - 2.0 * same as f64 / (k * (k - 1)) as f64)
}

/// Per-item values averaged by label-set size in groups `1`, `2`, `3+`.
pub fn variance_by_label_count(values: &[f64], categories: &CategoryTable) -> Result<Vec<Bucket>> {
    if values.len() != categories.num_items() {
        return Err(Error::DimensionMismatch {
            left: values.len(),
            right: categories.num_items(),
        });
    }
    let mut groups: [Vec<f64>; 3] = Default::default();
    for (i, &v) in values.iter().enumerate() {
        if let Some(l) = categories.labels(i as u32) {
            groups[l.len().clamp(1, 3) - 1].push(v);
        }
    }
    Ok(["1", "2", "3+"]
        .iter()
        .zip(&groups)
        .map(|(label, g)| Bucket {
            label: label.to_string(),
            count: g.len(),
            mean: mean(g),
        })
        .collect())
}

/// Epochs considered by the oscillation statistic.
pub const STABILITY_WINDOW: usize = 100;

/// Population standard deviation of the first differences of the first
/// [`STABILITY_WINDOW`] points of a loss curve.
pub fn oscillation_statistic(curve: &[f64]) -> f64 {
    let c = &curve[..curve.len().min(STABILITY_WINDOW)];
    if c.len() < 2 {
        return 0.0;
    }
    let diffs: Vec<f64> = c.windows(2).map(|w| w[1] - w[0]).collect();
    let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
    (diffs.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / diffs.len() as f64).sqrt()
}

/// Trailing moving average; the first `window − 1` points average what exists.
pub fn moving_average(curve: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..curve.len())
        .map(|i| {
            let s = &curve[(i + 1).saturating_sub(w)..=i];
            s.iter().sum::<f64>() / s.len() as f64
        })
        .collect()
}

/// Whether the mean of the last `window` points is below the mean of the first `window`.
pub fn trends_down(curve: &[f64], window: usize) -> bool {
    if curve.len() < 2 * window.max(1) {
        return false;
    }
    let first = mean(&curve[..window]).unwrap();
    let last = mean(&curve[curve.len() - window..]).unwrap();
    last < first
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties; `None` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

pub fn write_buckets_csv<W: Write>(mut out: W, key: &str, buckets: &[Bucket]) -> std::io::Result<()> {
    writeln!(out, "{key},count,mean_variance")?;
    for b in buckets {
        let m = b.mean.map(|m| m.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{}", b.label, b.count, m)?;
    }
    Ok(())
}

/// Two-row markdown table: group labels across, means below.
pub fn render_markdown(title: &str, buckets: &[Bucket]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| {title} | {} |", buckets.iter().map(|b| b.label.as_str()).collect::<Vec<_>>().join(" | "));
    let _ = writeln!(s, "|---|{}", "---|".repeat(buckets.len()));
    let cells: Vec<String> = buckets
        .iter()
        .map(|b| b.mean.map(|m| format!("{m:.4}")).unwrap_or_else(|| "n/a".into()))
        .collect();
    let _ = writeln!(s, "| variance | {} |", cells.join(" | "));
    let counts: Vec<String> = buckets.iter().map(|b| b.count.to_string()).collect();
    let _ = writeln!(s, "| count | {} |", counts.join(" | "));
    s
}

/// One loss curve of the stability experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRun {
    pub arm: String,
    pub batch_size: usize,
    pub seed: u64,
    pub curve: Vec<f64>,
}

impl StabilityRun {
    pub fn statistic(&self) -> f64 {
        oscillation_statistic(&self.curve)
    }
}

/// Long-format curves: `arm,batch_size,seed,epoch,total_loss`.
pub fn write_curves_csv<W: Write>(mut out: W, runs: &[StabilityRun]) -> std::io::Result<()> {
    writeln!(out, "arm,batch_size,seed,epoch,total_loss")?;
    for r in runs {
        for (e, v) in r.curve.iter().enumerate() {
            writeln!(out, "{},{},{},{},{}", r.arm, r.batch_size, r.seed, e + 1, v)?;
        }
    }
    Ok(())
}

pub fn write_stability_summary_csv<W: Write>(mut out: W, runs: &[StabilityRun]) -> std::io::Result<()> {
    writeln!(out, "arm,batch_size,seed,oscillation,ma10_decreasing")?;
    for r in runs {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.arm,
            r.batch_size,
            r.seed,
            r.statistic(),
            trends_down(&r.curve, 10)
        )?;
    }
    Ok(())
}

/// Variance summaries of nodes `range` of a table.
pub fn node_variance_norms(tables: &NodeTables, range: std::ops::Range<usize>, how: VarianceSummary) -> Vec<f64> {
    range
        .map(|n| {
            let row = tables.variance.row(n);
            match row.as_slice() {
                Some(s) => summarize_variance(s, how),
                None => summarize_variance(&row.to_vec(), how),
            }
        })
        .collect()
}

/// `o₂` of every user's top-K list (training items masked); `None` where undefined.
pub fn o2_per_user(tables: &NodeTables, graph: &InteractionGraph, categories: &CategoryTable, k: usize) -> Vec<Option<f64>> {
    let scorer = Scorer::new(tables, graph.num_users());
    (0..graph.num_users() as u32)
        .into_par_iter()
        .map(|u| {
            let top = top_k_from_scores(&scorer.scores(u), graph.user_items(u), k);
            o2_diversity(&top.items, categories)
        })
        .collect()
}

pub const DEFAULT_O2_EDGES: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

/// Groups `values` by a per-user key at ascending `edges`, skipping users whose key is `None`.
pub fn group_by_key(values: &[f64], keys: &[Option<f64>], edges: &[f64]) -> Result<Vec<Bucket>> {
    if values.len() != keys.len() {
        return Err(Error::DimensionMismatch {
            left: values.len(),
            right: keys.len(),
        });
    }
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); edges.len() + 1];
    for (&v, k) in values.iter().zip(keys) {
        if let Some(k) = k {
            groups[edges.partition_point(|&e| e <= *k)].push(v);
        }
    }
    Ok(groups
        .iter()
        .enumerate()
        .map(|(b, g)| {
            let lo = if b == 0 { 0.0 } else { edges[b - 1] };
            let hi = if b == edges.len() { "1.0".to_string() } else { format!("{:.1}", edges[b]) };
            Bucket {
                label: format!("{lo:.1}~{hi}"),
                count: g.len(),
                mean: mean(g),
            }
        })
        .collect())
}

/// Trains one run per (arm, batch size, seed) and keeps each total-loss curve.
pub fn stability_runs(
    graph: &InteractionGraph,
    base: &TrainConfig,
    arms: &[LossKind],
    batch_sizes: &[usize],
    seeds: &[u64],
) -> Result<Vec<StabilityRun>> {
    let mut runs = Vec::new();
    for &loss in arms {
        for &batch_size in batch_sizes {
            for &seed in seeds {
                let cfg = TrainConfig {
                    loss,
                    batch_size,
                    seed,
                    eval_every: 0,
                    ..*base
                };
                let out = train_on_graph(&cfg, graph, None)?;
                runs.push(StabilityRun {
                    arm: arm_name(loss).to_string(),
                    batch_size,
                    seed,
                    curve: out.log.totals(),
                });
            }
        }
    }
    Ok(runs)
}

/// Short arm names used by the stability experiment.
pub fn arm_name(loss: LossKind) -> &'static str {
    match loss {
        LossKind::BprWpc => "w2",
        LossKind::BprKlContrastive => "kl",
        LossKind::BprOnly => "bpr",
    }
}

pub fn parse_arm(name: &str) -> Result<LossKind> {
    match name.trim() {
        "w2" => Ok(LossKind::BprWpc),
        "kl" => Ok(LossKind::BprKlContrastive),
        "bpr" => Ok(LossKind::BprOnly),
        other => Err(Error::invalid("arm", format!("unknown arm `{other}` (expected w2, kl or bpr)"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cats(sets: &[&[&str]]) -> CategoryTable {
        CategoryTable::from_labels(
            sets.iter()
                .map(|s| (!s.is_empty()).then(|| s.iter().map(|x| x.to_string()).collect()))
                .collect(),
        )
    }

    #[test]
    fn variance_norm_values() {
        assert_eq!(variance_norm(&[3.0, 4.0]), 5.0);
        assert_eq!(variance_norm(&[0.0, 0.0]), 0.0);
        assert!((variance_norm(&[6.0, 8.0]) - 2.0 * variance_norm(&[3.0, 4.0])).abs() < 1e-15);
        assert_eq!(summarize_variance(&[3.0, 4.0], VarianceSummary::EntryMean), 3.5);
    }

    #[test]
    fn o1_buckets() {
        let b = group_by_o1(&[1.0, 3.0], &[5, 200], &DEFAULT_O1_EDGES).unwrap();
        assert_eq!(b.len(), 5);
        assert_eq!(b[0].count, 1);
        assert_eq!(b[0].mean, Some(1.0));
        assert_eq!(b[3].count, 1);
        assert_eq!(b[3].label, "2.0~2.5");
        assert_eq!(b[1].mean, None);
        let one = group_by_o1(&[2.0, 4.0, 6.0], &[20, 25, 30], &DEFAULT_O1_EDGES).unwrap();
        assert_eq!(one[1].mean, Some(4.0));
        assert!(group_by_o1(&[1.0], &[1], &[2.0, 1.0]).is_err());
    }

    #[test]
    fn o2_examples() {
        let c = cats(&[&["A"], &["A"], &["A"], &["B"], &["C"], &["A", "C"], &[]]);
        assert_eq!(o2_diversity(&[0, 1, 2], &c), Some(0.0));
        assert_eq!(o2_diversity(&[0, 3, 4], &c), Some(1.0));
        assert!((o2_diversity(&[0, 1, 3], &c).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        // multi-label item intersects both A and C
        assert!((o2_diversity(&[0, 4, 5], &c).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // unlabeled item skipped
        assert_eq!(o2_diversity(&[0, 6, 3], &c), Some(1.0));
        assert_eq!(o2_diversity(&[0, 6], &c), None);
    }

    #[test]
    fn label_count_groups() {
        let c = cats(&[&["A"], &["A", "B"], &["A", "B", "C", "D"], &["C"], &[]]);
        let g = variance_by_label_count(&[2.0, 5.0, 7.0, 4.0, 100.0], &c).unwrap();
        assert_eq!(g[0].mean, Some(3.0));
        assert_eq!(g[1].mean, Some(5.0));
        assert_eq!(g[2].mean, Some(7.0));
        assert_eq!(g.iter().map(|b| b.count).sum::<usize>(), 4);
        let single = variance_by_label_count(&[1.0, 2.0], &cats(&[&["A"], &["B"]])).unwrap();
        assert_eq!((single[0].count, single[1].count, single[2].count), (2, 0, 0));
    }

    #[test]
    fn oscillation_examples() {
        assert_eq!(oscillation_statistic(&[3.0; 50]), 0.0);
        let line: Vec<f64> = (0..120).map(|e| 10.0 - 0.05 * e as f64).collect();
        assert!(oscillation_statistic(&line) < 1e-12);
        let alt: Vec<f64> = (0..51).map(|e| if e % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!((oscillation_statistic(&alt) - 2.0).abs() < 1e-12);
        // only the first 100 points count
        let mut tail = line.clone();
        tail[110] += 5.0;
        assert_eq!(oscillation_statistic(&tail), oscillation_statistic(&line));
    }

    #[test]
    fn moving_average_and_trend() {
        assert_eq!(moving_average(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
        let down: Vec<f64> = (0..30).map(|e| 5.0 - 0.1 * e as f64 + if e % 2 == 0 { 0.3 } else { 0.0 }).collect();
        assert!(trends_down(&down, 10));
        assert!(!trends_down(&[1.0; 30], 10));
        assert!(!trends_down(&down[..15], 10));
    }

    #[test]
    fn spearman_values() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 45.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // ties share ranks: ranks x = (1.5, 1.5, 3), y = (1, 2, 3)
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r - 0.8660254037844386).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    #[test]
    fn markdown_renders_every_bucket() {
        let b = group_by_o1(&[1.0, 3.0], &[5, 200], &DEFAULT_O1_EDGES).unwrap();
        let md = render_markdown("o1", &b);
        assert!(md.contains("0.0~1.0") && md.contains("2.5~inf") && md.contains("n/a"));
        assert_eq!(md.lines().count(), 4);
    }

    #[test]
    fn o2_grouping_skips_undefined() {
        let g = group_by_key(&[1.0, 2.0, 3.0], &[Some(0.1), None, Some(0.95)], &DEFAULT_O2_EDGES).unwrap();
        assert_eq!(g.len(), 5);
        assert_eq!(g.iter().map(|b| b.count).sum::<usize>(), 2);
        assert_eq!(g[4].mean, Some(3.0));
        assert_eq!(g[0].label, "0.0~0.2");
    }

    #[test]
    fn arm_names_round_trip() {
        for k in [LossKind::BprWpc, LossKind::BprKlContrastive, LossKind::BprOnly] {
            assert_eq!(parse_arm(arm_name(k)).unwrap(), k);
        }
        assert!(parse_arm("hinge").is_err());
    }

    proptest! {
        #[test]
        fn o2_is_permutation_invariant(labels in prop::collection::vec(0u8..4, 2..10), rot in 0usize..10) {
            let sets: Vec<Option<BTreeSet<String>>> = labels.iter().map(|l| Some([l.to_string()].into())).collect();
            let c = CategoryTable::from_labels(sets);
            let mut items: Vec<u32> = (0..labels.len() as u32).collect();
            let a = o2_diversity(&items, &c).unwrap();
            items.rotate_left(rot % labels.len());
            items.reverse();
            let b = o2_diversity(&items, &c).unwrap();
            prop_assert!((a - b).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn o1_populations_reconcile(counts in prop::collection::vec(1usize..2000, 1..50)) {
            let values: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
            let b = group_by_o1(&values, &counts, &DEFAULT_O1_EDGES).unwrap();
            prop_assert_eq!(b.iter().map(|x| x.count).sum::<usize>(), counts.len());
        }

        #[test]
        fn oscillation_nonnegative_and_zero_for_affine(a in -5.0f64..5.0, b in -1.0f64..1.0, noise in prop::collection::vec(-1.0f64..1.0, 3..40)) {
            let affine: Vec<f64> = (0..noise.len()).map(|e| a + b * e as f64).collect();
            prop_assert!(oscillation_statistic(&affine) < 1e-9);
            prop_assert!(oscillation_statistic(&noise) >= 0.0);
        }
    }
}
