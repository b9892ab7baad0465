//! Training objective: BPR ranking loss, the in-batch Wasserstein contrastive
//! term (or its KL counterpart), and L2 regularization of layer-0 parameters.
//!
//! Each loss exists twice: as a plain function over embeddings (used for
//! reporting and as a cross-check) and as a tape recording used for training.

use std::collections::BTreeSet;
use std::str::FromStr;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::encoder::NodeTables;
use crate::error::{Error, Result};
use crate::gauss::{self, softplus, GaussianEmbedding};
use crate::grad::{PairDistance, Tape, Var};

/// Which auxiliary term accompanies BPR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    BprOnly,
    BprWpc,
    BprKlContrastive,
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bpr_only" | "bpr" => Ok(Self::BprOnly),
            "bpr+wpc" | "bpr_wpc" => Ok(Self::BprWpc),
            "bpr+kl_contrastive" | "bpr+kl" | "bpr_kl" => Ok(Self::BprKlContrastive),
            other => Err(Error::invalid(
                "loss",
                format!("unknown loss `{other}` (bpr_only, bpr+wpc, bpr+kl_contrastive)"),
            )),
        }
    }
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::BprOnly => "bpr_only",
            Self::BprWpc => "bpr+wpc",
            Self::BprKlContrastive => "bpr+kl_contrastive",
        }
    }
}

/// One BPR sample: user, interacted item, sampled non-interacted item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub user: u32,
    pub positive: u32,
    pub negative: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Batch {
    pub triples: Vec<Triple>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Distinct joint-space node ids touched by the batch, ascending.
    pub fn touched_nodes(&self, num_users: usize) -> Vec<u32> {
        let off = num_users as u32;
        let set: BTreeSet<u32> = self
            .triples
            .iter()
            .flat_map(|t| [t.user, off + t.positive, off + t.negative])
            .collect();
        set.into_iter().collect()
    }
}

/// Mean of `−ln σ(pos − neg)` over the batch.
pub fn bpr_loss(pos_scores: &[f64], neg_scores: &[f64]) -> Result<f64> {
    if pos_scores.len() != neg_scores.len() {
        return Err(Error::DimensionMismatch {
            left: pos_scores.len(),
            right: neg_scores.len(),
        });
    }
    if pos_scores.is_empty() {
        return Err(Error::Contract("bpr_loss over an empty batch".into()));
    }
    let total: f64 = pos_scores
        .iter()
        .zip(neg_scores)
        .map(|(p, n)| softplus(n - p))
        .sum();
    Ok(total / pos_scores.len() as f64)
}

/// InfoNCE-shaped loss from a square score matrix whose diagonal holds the
/// positive pairs: `mean_a [ log Σ_b exp f_ab − f_aa ]`.
pub fn contrastive_from_scores(scores: ArrayView2<f64>) -> Result<f64> {
    let b = scores.nrows();
    if b < 2 || scores.ncols() != b {
        return Err(Error::Contract(format!(
            "contrastive loss needs a square score matrix with at least two rows, got {:?}",
            scores.dim()
        )));
    }
    let mut total = 0.0;
    for (a, row) in scores.rows().into_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[a];
    }
    Ok(total / b as f64)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("tau", format!("must be positive, got {tau}")))
    }
}

fn contrastive_with<F>(users: &[GaussianEmbedding], positives: &[GaussianEmbedding], tau: f64, dist: F) -> Result<f64>
where
    F: Fn(&GaussianEmbedding, &GaussianEmbedding) -> Result<f64>,
{
    check_tau(tau)?;
    if users.len() != positives.len() {
        return Err(Error::DimensionMismatch {
            left: users.len(),
            right: positives.len(),
        });
    }
    let b = users.len();
    let mut scores = ndarray::Array2::zeros((b, b));
    for (a, u) in users.iter().enumerate() {
        for (c, i) in positives.iter().enumerate() {
            scores[[a, c]] = gauss::sigmoid(-dist(u, i)?) / tau;
        }
    }
    contrastive_from_scores(scores.view())
}

/// In-batch Wasserstein contrastive loss with score `(1/τ)·σ(−W2²)`.
pub fn wpc_loss(users: &[GaussianEmbedding], positives: &[GaussianEmbedding], tau: f64) -> Result<f64> {
    contrastive_with(users, positives, tau, gauss::w2_squared)
}

/// Same shape as [`wpc_loss`] with the symmetrized KL divergence as distance.
pub fn kl_contrastive_loss(users: &[GaussianEmbedding], positives: &[GaussianEmbedding], tau: f64) -> Result<f64> {
    contrastive_with(users, positives, tau, |a, b| {
        if a.dim() != b.dim() {
            return Err(Error::DimensionMismatch { left: a.dim(), right: b.dim() });
        }
        Ok(gauss::symmetric_kl_parts(a.mean(), a.variance(), b.mean(), b.variance()))
    })
}

/// `λ·(Σμ² + Σσ²)` over the given nodes of the layer-0 tables, divided by the batch size.
pub fn l2_regularizer(tables: &NodeTables, nodes: &[u32], lambda: f64, batch_size: usize) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid("lambda", format!("must be non-negative, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let sum: f64 = nodes
        .iter()
        .map(|&n| {
            let (m, v) = (tables.mean.row(n as usize), tables.variance.row(n as usize));
            m.dot(&m) + v.dot(&v)
        })
        .sum();
    Ok(lambda * sum / batch_size.max(1) as f64)
}

/// Weights of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub omega: f64,
    pub tau: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::BprWpc,
            omega: 0.1,
            tau: 0.25,
            lambda: 1e-5,
        }
    }
}

/// Component values of one objective evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub bpr: f64,
    /// Unweighted contrastive term; 0 for BPR-only.
    pub contrastive: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.bpr.is_finite() && self.contrastive.is_finite() && self.reg.is_finite() && self.total.is_finite()
    }
}

/// Tape handles of a recorded objective.
#[derive(Debug, Clone, Copy)]
pub struct RecordedLoss {
    pub bpr: Var,
    pub contrastive: Option<Var>,
    pub reg: Option<Var>,
    pub total: Var,
}

impl RecordedLoss {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            bpr: tape.scalar_value(self.bpr),
            contrastive: self.contrastive.map_or(0.0, |v| tape.scalar_value(v)),
            reg: self.reg.map_or(0.0, |v| tape.scalar_value(v)),
            total: tape.scalar_value(self.total),
        }
    }
}

/// Inputs of [`record_objective`]: final tables for scoring, layer-0 tables for
/// regularization (all as tape values over the joint node space).
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveInputs {
    pub final_mean: Var,
    pub final_variance: Var,
    pub base_mean: Var,
    pub base_variance: Var,
    pub num_users: usize,
}

/// Records `L_BPR + ω·L_contrastive + λ·reg` for one batch.
pub fn record_objective(tape: &mut Tape, inputs: ObjectiveInputs, batch: &Batch, cfg: &LossConfig) -> Result<RecordedLoss> {
    check_tau(tau_for(cfg))?;
    if batch.is_empty() {
        return Err(Error::Contract("objective over an empty batch".into()));
    }
    let off = inputs.num_users as u32;
    let users: Vec<u32> = batch.triples.iter().map(|t| t.user).collect();
    let pos: Vec<u32> = batch.triples.iter().map(|t| off + t.positive).collect();
    let neg: Vec<u32> = batch.triples.iter().map(|t| off + t.negative).collect();
    let (fm, fv) = (inputs.final_mean, inputs.final_variance);

    // −ln σ(ŷ_pos − ŷ_neg) = softplus(W2²_pos − W2²_neg)
    let d_pos = tape.pair_w2(fm, fv, users.clone(), pos.clone());
    let d_neg = tape.pair_w2(fm, fv, users.clone(), neg);
    let margin = tape.sub(d_pos, d_neg);
    let per = tape.softplus(margin, 0.0);
    let bpr = tape.mean(per);

    let contrastive = match cfg.kind {
        LossKind::BprOnly => None,
        LossKind::BprWpc | LossKind::BprKlContrastive => {
            if batch.len() < 2 {
                return Err(Error::Contract("contrastive term needs at least two pairs per batch".into()));
            }
            let dist = if cfg.kind == LossKind::BprWpc {
                PairDistance::W2
            } else {
                PairDistance::SymmetricKl
            };
            Some(tape.in_batch_contrastive(fm, fv, users, pos, dist, cfg.tau))
        }
    };

    let reg = if cfg.lambda > 0.0 {
        let nodes = batch.touched_nodes(inputs.num_users);
        let m = tape.sum_squares_rows(inputs.base_mean, nodes.clone());
        let v = tape.sum_squares_rows(inputs.base_variance, nodes);
        let s = tape.add(m, v);
        Some(tape.scale(s, cfg.lambda / batch.len() as f64))
    } else {
        None
    };

    let mut terms = vec![(bpr, 1.0)];
    if let Some(c) = contrastive {
        terms.push((c, cfg.omega));
    }
    if let Some(r) = reg {
        terms.push((r, 1.0));
    }
    let total = tape.weighted_sum(terms);
    Ok(RecordedLoss {
        bpr,
        contrastive,
        reg,
        total,
    })
}

fn tau_for(cfg: &LossConfig) -> f64 {
    match cfg.kind {
        LossKind::BprOnly => 1.0,
        _ => cfg.tau,
    }
}

/// Evaluates the objective on fixed tables (no gradient).
pub fn total_loss(
    batch: &Batch,
    final_tables: &NodeTables,
    base_tables: &NodeTables,
    num_users: usize,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let inputs = ObjectiveInputs {
        final_mean: tape.leaf(final_tables.mean.clone()),
        final_variance: tape.leaf(final_tables.variance.clone()),
        base_mean: tape.leaf(base_tables.mean.clone()),
        base_variance: tape.leaf(base_tables.variance.clone()),
        num_users,
    };
    let rec = record_objective(&mut tape, inputs, batch, cfg)?;
    Ok(rec.breakdown(&tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn emb(m: &[f64], v: &[f64]) -> GaussianEmbedding {
        GaussianEmbedding::new(m.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn bpr_reference_values() {
        assert!((bpr_loss(&[0.3, -1.0], &[0.3, -1.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let hi = bpr_loss(&[10.0], &[0.0]).unwrap();
        assert!((hi - (-(gauss::sigmoid(10.0)).ln())).abs() < 1e-15);
        assert!((hi - 4.5398899e-5).abs() < 1e-11);
        let lo = bpr_loss(&[0.0], &[10.0]).unwrap();
        assert!((lo - 10.0000453989).abs() < 1e-9);
        assert!(bpr_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn contrastive_reference_values() {
        let uniform = Array2::from_elem((4, 4), 1.7);
        assert!((contrastive_from_scores(uniform.view()).unwrap() - 4f64.ln()).abs() < 1e-14);
        // B = 2, f(u,i) = 2, f(u,j) = 0 → log(1 + e^−2)
        let s = array![[2.0, 0.0], [0.0, 2.0]];
        let v = contrastive_from_scores(s.view()).unwrap();
        assert!((v - (1.0 + (-2f64).exp()).ln()).abs() < 1e-15);
        assert!((v - 0.126928).abs() < 1e-6);
        assert!(contrastive_from_scores(array![[1.0]].view()).is_err());
    }

    #[test]
    fn identical_distributions_give_log_b() {
        let e = emb(&[0.2, 0.1], &[1.0, 2.0]);
        let users = vec![e.clone(); 3];
        assert!((wpc_loss(&users, &users, 0.25).unwrap() - 3f64.ln()).abs() < 1e-14);
        assert!((kl_contrastive_loss(&users, &users, 0.25).unwrap() - 3f64.ln()).abs() < 1e-14);
        assert!(wpc_loss(&users[..1], &users[..1], 0.25).is_err());
        assert!(wpc_loss(&users, &users, 0.0).is_err());
    }

    #[test]
    fn dominant_positive_drives_loss_to_zero() {
        let users = vec![emb(&[0.0], &[1.0]), emb(&[50.0], &[1.0])];
        let pos = users.clone();
        let l = wpc_loss(&users, &pos, 0.01).unwrap();
        assert!((0.0..1e-12).contains(&l), "{l}");
    }

    #[test]
    fn kl_score_saturates_where_w2_does_not() {
        // means 10σ apart with narrow variances
        let u = emb(&[0.0], &[0.01]);
        let far = emb(&[1.0], &[0.01]);
        let w2 = gauss::w2_squared(&u, &far).unwrap();
        let kl = gauss::symmetric_kl_parts(u.mean(), u.variance(), far.mean(), far.variance());
        assert!((w2 - 1.0).abs() < 1e-12);
        assert!((kl - 50.0).abs() < 1e-9);
        let f_w2 = gauss::sigmoid(-w2);
        let f_kl = gauss::sigmoid(-kl);
        assert!(f_w2 > 0.25);
        assert!(f_kl < 1e-21);
        let users = vec![u.clone(), far.clone()];
        let pos = vec![u, far];
        let lw = wpc_loss(&users, &pos, 0.25).unwrap();
        let lk = kl_contrastive_loss(&users, &pos, 0.25).unwrap();
        assert!(lk < lw);
    }

    #[test]
    fn regularizer_reference_values() {
        let tables = NodeTables::new(array![[3.0, 4.0]], array![[1.0, 1.0]]).unwrap();
        assert_eq!(l2_regularizer(&tables, &[0], 1.0, 1).unwrap(), 27.0);
        assert_eq!(l2_regularizer(&tables, &[0], 0.0, 1).unwrap(), 0.0);
        assert_eq!(l2_regularizer(&tables, &[0], 2.0, 1).unwrap(), 54.0);
        assert!(l2_regularizer(&tables, &[0], -1.0, 1).is_err());
    }

    fn random_tables(n: usize, d: usize, rng: &mut ChaCha8Rng) -> NodeTables {
        NodeTables::new(
            Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0)),
            Array2::from_shape_fn((n, d), |_| rng.gen_range(0.1..2.0)),
        )
        .unwrap()
    }

    fn toy_batch() -> Batch {
        Batch {
            triples: vec![
                Triple { user: 0, positive: 0, negative: 2 },
                Triple { user: 1, positive: 1, negative: 0 },
                Triple { user: 2, positive: 3, negative: 1 },
            ],
        }
    }

    #[test]
    fn tape_objective_matches_plain_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nu = 3;
        let fin = random_tables(7, 4, &mut rng);
        let base = random_tables(7, 4, &mut rng);
        let batch = toy_batch();
        for kind in [LossKind::BprOnly, LossKind::BprWpc, LossKind::BprKlContrastive] {
            let cfg = LossConfig { kind, omega: 0.3, tau: 0.5, lambda: 0.01 };
            let got = total_loss(&batch, &fin, &base, nu, &cfg).unwrap();
            let ue: Vec<_> = batch.triples.iter().map(|t| fin.embedding(t.user as usize)).collect();
            let pe: Vec<_> = batch.triples.iter().map(|t| fin.embedding(nu + t.positive as usize)).collect();
            let ne: Vec<_> = batch.triples.iter().map(|t| fin.embedding(nu + t.negative as usize)).collect();
            let pos: Vec<f64> = ue.iter().zip(&pe).map(|(u, i)| gauss::prediction_score(u, i).unwrap()).collect();
            let neg: Vec<f64> = ue.iter().zip(&ne).map(|(u, i)| gauss::prediction_score(u, i).unwrap()).collect();
            let bpr = bpr_loss(&pos, &neg).unwrap();
            let con = match kind {
                LossKind::BprOnly => 0.0,
                LossKind::BprWpc => wpc_loss(&ue, &pe, 0.5).unwrap(),
                LossKind::BprKlContrastive => kl_contrastive_loss(&ue, &pe, 0.5).unwrap(),
            };
            let reg = l2_regularizer(&base, &batch.touched_nodes(nu), 0.01, batch.len()).unwrap();
            assert!((got.bpr - bpr).abs() < 1e-12);
            assert!((got.contrastive - con).abs() < 1e-10, "{kind:?}");
            assert!((got.reg - reg).abs() < 1e-14);
            assert!((got.total - (bpr + 0.3 * con + reg)).abs() < 1e-10);
        }
    }

    #[test]
    fn bpr_only_without_reg_is_plain_bpr() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fin = random_tables(7, 3, &mut rng);
        let cfg = LossConfig { kind: LossKind::BprWpc, omega: 0.0, tau: 0.25, lambda: 0.0 };
        let got = total_loss(&toy_batch(), &fin, &fin, 3, &cfg).unwrap();
        assert_eq!(got.total, got.bpr);
    }

    #[test]
    fn loss_kind_parses() {
        assert_eq!("bpr_only".parse::<LossKind>().unwrap(), LossKind::BprOnly);
        assert_eq!("bpr+wpc".parse::<LossKind>().unwrap(), LossKind::BprWpc);
        assert_eq!("bpr+kl_contrastive".parse::<LossKind>().unwrap(), LossKind::BprKlContrastive);
        assert!("wpc".parse::<LossKind>().is_err());
    }

    proptest! {
        #[test]
        fn bpr_is_translation_invariant(
            pos in prop::collection::vec(-5.0f64..5.0, 1..20),
            shift in -100.0f64..100.0,
            seed in 0u64..100,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let neg: Vec<f64> = pos.iter().map(|_| rng.gen_range(-5.0..5.0)).collect();
            let a = bpr_loss(&pos, &neg).unwrap();
            let ps: Vec<f64> = pos.iter().map(|p| p + shift).collect();
            let ns: Vec<f64> = neg.iter().map(|n| n + shift).collect();
            prop_assert!((a - bpr_loss(&ps, &ns).unwrap()).abs() < 1e-9);
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn wpc_bounds_and_permutation_invariance(seed in 0u64..200, b in 2usize..7, tau in 0.05f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| emb(
                &[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
                &[rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0)],
            );
            let users: Vec<_> = (0..b).map(|_| mk(&mut rng)).collect();
            let pos: Vec<_> = (0..b).map(|_| mk(&mut rng)).collect();
            let l = wpc_loss(&users, &pos, tau).unwrap();
            prop_assert!(l >= (b as f64).ln() - 1.0 / tau - 1e-12);
            prop_assert!(l <= (b as f64).ln() + 1.0 / tau + 1e-12);
            let mut perm: Vec<usize> = (0..b).collect();
            perm.rotate_left(1);
            let u2: Vec<_> = perm.iter().map(|&k| users[k].clone()).collect();
            let p2: Vec<_> = perm.iter().map(|&k| pos[k].clone()).collect();
            prop_assert!((l - wpc_loss(&u2, &p2, tau).unwrap()).abs() < 1e-12);
        }
    }
}
