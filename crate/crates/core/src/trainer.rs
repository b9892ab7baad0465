//! Parameter storage, initialization, Adam, negative sampling and the epoch loop.

use std::io::{Read, Write};
use std::time::Instant;

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, EncoderKind, NodeTables, VarianceRule};
use crate::error::{Error, Result};
use crate::eval::evaluate_all;
use crate::gauss::VARIANCE_FLOOR;
use crate::grad::{finite_diff_check, FdReport, Tape};
use crate::graph::{build_graph, InteractionGraph, InteractionSet};
use crate::losses::{record_objective, Batch, LossBreakdown, LossConfig, LossKind, ObjectiveInputs, Triple};

const MAX_REJECTIONS: usize = 100;
const CHECKPOINT_MAGIC: &[u8; 5] = b"GREC1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub layers: usize,
    pub lr: f64,
    pub lambda: f64,
    pub omega: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub encoder: EncoderKind,
    pub variance_rule: VarianceRule,
    pub loss: LossKind,
    pub negatives: usize,
    /// Evaluate on the held-out set every this many epochs; 0 disables.
    pub eval_every: usize,
    pub eval_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            lr: 1e-3,
            lambda: 1e-5,
            omega: 0.1,
            tau: 0.25,
            batch_size: 2048,
            epochs: 100,
            seed: 42,
            encoder: EncoderKind::Wgat,
            variance_rule: VarianceRule::ASquared,
            loss: LossKind::BprWpc,
            negatives: 1,
            eval_every: 0,
            eval_k: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("dim", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("must be positive, got {}", self.lr)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda", format!("must be non-negative, got {}", self.lambda)));
        }
        if !(self.omega >= 0.0) {
            return Err(Error::invalid("omega", format!("must be non-negative, got {}", self.omega)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::invalid("tau", format!("must lie in (0, 1], got {}", self.tau)));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size", "must be at least 2"));
        }
        if self.negatives != 1 {
            return Err(Error::invalid("negatives", "only one negative per positive is supported"));
        }
        if self.eval_k == 0 {
            return Err(Error::invalid("eval_k", "must be positive"));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            kind: self.encoder,
            layers: self.layers,
            variance_rule: self.variance_rule,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            kind: self.loss,
            omega: self.omega,
            tau: self.tau,
            lambda: self.lambda,
        }
    }
}

/// Adam first/second moments for both tables.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m_mean: Array2<f64>,
    pub v_mean: Array2<f64>,
    pub m_raw: Array2<f64>,
    pub v_raw: Array2<f64>,
    pub step: u64,
}

impl AdamState {
    fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            m_mean: Array2::zeros((rows, dim)),
            v_mean: Array2::zeros((rows, dim)),
            m_raw: Array2::zeros((rows, dim)),
            v_raw: Array2::zeros((rows, dim)),
            step: 0,
        }
    }
}

/// Trainable tables over the joint node space: means and raw (pre-softplus) variances.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub num_users: usize,
    pub num_items: usize,
    pub mean: Array2<f64>,
    pub raw_variance: Array2<f64>,
    pub adam: AdamState,
}

/// Materialized variance `softplus(raw) + 1e-6`.
pub fn materialize_variance(raw: &Array2<f64>) -> Array2<f64> {
    raw.mapv(|r| crate::gauss::softplus(r) + VARIANCE_FLOOR)
}

/// Raw value whose materialized variance equals `variance`.
pub fn raw_for_variance(variance: f64) -> Result<f64> {
    let target = variance - VARIANCE_FLOOR;
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::NonPositiveVariance { index: 0, value: variance });
    }
    // softplus⁻¹(y) = y + ln(1 − e^{−y})
    Ok(target + (-(-target).exp_m1()).ln())
}

impl ModelParams {
    pub fn dim(&self) -> usize {
        self.mean.ncols()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn variance(&self) -> Array2<f64> {
        materialize_variance(&self.raw_variance)
    }

    /// Layer-0 mean and materialized variance.
    pub fn base_tables(&self) -> NodeTables {
        NodeTables {
            mean: self.mean.clone(),
            variance: self.variance(),
        }
    }

    /// Propagated embeddings used for scoring.
    pub fn final_tables(&self, graph: &InteractionGraph, encoder: EncoderConfig) -> Result<NodeTables> {
        Ok(Encoder::new(graph, encoder).forward(&self.base_tables())?.output)
    }
}

/// Xavier-uniform means with fan-in = fan-out = `dim` and unit initial variance.
pub fn init_params(num_users: usize, num_items: usize, dim: usize, seed: u64) -> Result<ModelParams> {
    if dim == 0 {
        return Err(Error::invalid("dim", "must be positive"));
    }
    let rows = num_users + num_items;
    let bound = xavier_bound(dim, dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = Array2::from_shape_simple_fn((rows, dim), || rng.gen_range(-bound..bound));
    let raw = raw_for_variance(1.0)?;
    Ok(ModelParams {
        num_users,
        num_items,
        mean,
        raw_variance: Array2::from_elem((rows, dim), raw),
        adam: AdamState::zeros(rows, dim),
    })
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn adam_update(param: &mut Array2<f64>, m: &mut Array2<f64>, v: &mut Array2<f64>, grad: &Array2<f64>, opt: &Adam, step: u64) {
    let c1 = 1.0 - opt.beta1.powi(step as i32);
    let c2 = 1.0 - opt.beta2.powi(step as i32);
    Zip::from(param).and(m).and(v).and(grad).for_each(|p, m, v, &g| {
        *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
        *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
        *p -= opt.lr * (*m / c1) / ((*v / c2).sqrt() + opt.eps);
    });
}

/// One bias-corrected Adam update of both tables. A non-finite gradient
/// aborts the step before anything is modified.
pub fn adam_step(params: &mut ModelParams, grad_mean: &Array2<f64>, grad_raw: &Array2<f64>, opt: &Adam) -> Result<()> {
    if grad_mean.dim() != params.mean.dim() || grad_raw.dim() != params.raw_variance.dim() {
        return Err(Error::DimensionMismatch {
            left: grad_mean.len() + grad_raw.len(),
            right: params.mean.len() + params.raw_variance.len(),
        });
    }
    if grad_mean.iter().chain(grad_raw.iter()).any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    let st = &mut params.adam;
    st.step += 1;
    adam_update(&mut params.mean, &mut st.m_mean, &mut st.v_mean, grad_mean, opt, st.step);
    adam_update(&mut params.raw_variance, &mut st.m_raw, &mut st.v_raw, grad_raw, opt, st.step);
    Ok(())
}

/// Uniform item outside the user's training items; `None` if the user has
/// interacted with every item.
pub fn sample_negative<R: Rng>(graph: &InteractionGraph, user: u32, rng: &mut R) -> Option<u32> {
    let seen = graph.user_items(user);
    let n = graph.num_items();
    if seen.len() >= n {
        return None;
    }
    for _ in 0..MAX_REJECTIONS {
        let j = rng.gen_range(0..n as u32);
        if seen.binary_search(&j).is_err() {
            return Some(j);
        }
    }
    // complement has exactly n − |seen| members; pick the k-th
    let mut k = rng.gen_range(0..(n - seen.len()) as u32);
    let mut j = 0u32;
    for &s in seen {
        if j + k < s {
            break;
        }
        k -= s - j;
        j = s + 1;
    }
    Some(j + k)
}

fn triple_for_edge<R: Rng>(graph: &InteractionGraph, (user, item): (u32, u32), rng: &mut R) -> Option<Triple> {
    match sample_negative(graph, user, rng) {
        Some(negative) => Some(Triple {
            user,
            positive: item,
            negative,
        }),
        None => {
            log::warn!("user {user} has interacted with every item; skipped");
            None
        }
    }
}

/// `batch_size` triples with (u, i) drawn uniformly over training edges.
pub fn sample_triplets<R: Rng>(graph: &InteractionGraph, batch_size: usize, rng: &mut R) -> Batch {
    let edges = graph.edges();
    let mut triples = Vec::with_capacity(batch_size);
    if edges.is_empty() {
        return Batch { triples };
    }
    let mut attempts = 0;
    while triples.len() < batch_size && attempts < batch_size * 4 {
        attempts += 1;
        let e = edges[rng.gen_range(0..edges.len())];
        triples.extend(triple_for_edge(graph, e, rng));
    }
    Batch { triples }
}

/// Consecutive batch ranges; a trailing single element joins the previous batch.
fn batch_ranges(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().map_or(false, |r| r.len() < 2) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

/// Loss of one batch and its gradients with respect to the mean and raw-variance tables.
#[derive(Debug, Clone)]
pub struct StepGradients {
    pub loss: LossBreakdown,
    pub grad_mean: Array2<f64>,
    pub grad_raw: Array2<f64>,
}

/// Records the full objective from raw parameters: softplus reparameterization,
/// encoder propagation (attention included) and the configured loss.
pub fn loss_and_gradients(
    mean: &Array2<f64>,
    raw_variance: &Array2<f64>,
    encoder: &Encoder,
    num_users: usize,
    batch: &Batch,
    loss: &LossConfig,
) -> Result<StepGradients> {
    let mut tape = Tape::new();
    let m = tape.leaf(mean.clone());
    let raw = tape.leaf(raw_variance.clone());
    let var = tape.softplus(raw, VARIANCE_FLOOR);
    let fwd = encoder.record(&mut tape, m, var);
    let inputs = ObjectiveInputs {
        final_mean: fwd.mean,
        final_variance: fwd.variance,
        base_mean: m,
        base_variance: var,
        num_users,
    };
    let rec = record_objective(&mut tape, inputs, batch, loss)?;
    let breakdown = rec.breakdown(&tape);
    let grads = tape.backward(rec.total)?;
    Ok(StepGradients {
        loss: breakdown,
        grad_mean: grads.wrt(&tape, m),
        grad_raw: grads.wrt(&tape, raw),
    })
}

/// One row of the per-epoch log; losses are batch means over the epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub bpr: f64,
    pub contrastive: f64,
    pub reg: f64,
    pub total: f64,
    pub recall: Option<f64>,
    pub ndcg: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "epoch,l_bpr,l_wpc,l_reg,l_total,recall20,ndcg20")?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.bpr,
                r.contrastive,
                r.reg,
                r.total,
                opt(r.recall),
                opt(r.ndcg)
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: TrainLog,
}

/// Runs `config.epochs` epochs over the training interactions. Each epoch
/// shuffles the training edges, pairs each with a sampled negative and takes
/// one Adam step per batch with attention recomputed from current parameters.
pub fn train(config: &TrainConfig, train_set: &InteractionSet, held_out: Option<&InteractionSet>) -> Result<TrainOutcome> {
    config.validate()?;
    let graph = build_graph(train_set)?;
    train_on_graph(config, &graph, held_out)
}

pub fn train_on_graph(config: &TrainConfig, graph: &InteractionGraph, held_out: Option<&InteractionSet>) -> Result<TrainOutcome> {
    config.validate()?;
    let mut params = init_params(graph.num_users(), graph.num_items(), config.dim, config.seed)?;
    let encoder = Encoder::new(graph, config.encoder_config());
    let loss_cfg = config.loss_config();
    let opt = Adam::new(config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut edges = graph.edges();
    let mut log = TrainLog::default();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        edges.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut batches = 0usize;
        for (b, range) in batch_ranges(edges.len(), config.batch_size).into_iter().enumerate() {
            let triples: Vec<Triple> = edges[range]
                .iter()
                .filter_map(|&e| triple_for_edge(graph, e, &mut rng))
                .collect();
            if triples.len() < 2 {
                continue;
            }
            let batch = Batch { triples };
            let step = loss_and_gradients(&params.mean, &params.raw_variance, &encoder, graph.num_users(), &batch, &loss_cfg)?;
            if !step.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    what: format!("loss {:?}", step.loss),
                });
            }
            adam_step(&mut params, &step.grad_mean, &step.grad_raw, &opt).map_err(|e| match e {
                Error::NonFiniteGradient => Error::Diverged {
                    epoch,
                    batch: b,
                    what: "gradient".into(),
                },
                other => other,
            })?;
            sums.bpr += step.loss.bpr;
            sums.contrastive += step.loss.contrastive;
            sums.reg += step.loss.reg;
            sums.total += step.loss.total;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        let mut rec = EpochRecord {
            epoch,
            bpr: sums.bpr / n,
            contrastive: sums.contrastive / n,
            reg: sums.reg / n,
            total: sums.total / n,
            recall: None,
            ndcg: None,
            seconds: 0.0,
        };
        if let Some(test) = held_out {
            if config.eval_every > 0 && (epoch % config.eval_every == 0 || epoch == config.epochs) {
                let tables = encoder.forward(&params.base_tables())?.output;
                let report = evaluate_all(&tables, graph, test, config.eval_k)?;
                rec.recall = Some(report.recall);
                rec.ndcg = Some(report.ndcg);
            }
        }
        rec.seconds = started.elapsed().as_secs_f64();
        log::info!(
            "epoch {epoch}: bpr={:.5} contrastive={:.5} reg={:.3e} total={:.5}{} ({:.1}s)",
            rec.bpr,
            rec.contrastive,
            rec.reg,
            rec.total,
            rec.recall.map(|r| format!(" recall@{}={r:.4}", config.eval_k)).unwrap_or_default(),
            rec.seconds
        );
        log.records.push(rec);
    }
    Ok(TrainOutcome { params, log })
}

/// Saved model: selectors plus mean and raw-variance tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub layers: usize,
    pub encoder: EncoderKind,
    pub loss: LossKind,
    pub variance_rule: VarianceRule,
    pub num_users: usize,
    pub num_items: usize,
    pub mean: Array2<f64>,
    pub raw_variance: Array2<f64>,
}

impl Checkpoint {
    pub fn new(params: &ModelParams, config: &TrainConfig) -> Self {
        Self {
            layers: config.layers,
            encoder: config.encoder,
            loss: config.loss,
            variance_rule: config.variance_rule,
            num_users: params.num_users,
            num_items: params.num_items,
            mean: params.mean.clone(),
            raw_variance: params.raw_variance.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.ncols()
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            kind: self.encoder,
            layers: self.layers,
            variance_rule: self.variance_rule,
        }
    }

    pub fn base_tables(&self) -> NodeTables {
        NodeTables {
            mean: self.mean.clone(),
            variance: materialize_variance(&self.raw_variance),
        }
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        for v in [self.dim(), self.layers, self.num_users, self.num_items] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        let enc = match self.encoder {
            EncoderKind::Wgat => 0u8,
            EncoderKind::LightgcnGauss => 1,
        };
        let loss = match self.loss {
            LossKind::BprOnly => 0u8,
            LossKind::BprWpc => 1,
            LossKind::BprKlContrastive => 2,
        };
        let rule = match self.variance_rule {
            VarianceRule::ASquared => 0u8,
            VarianceRule::ASingle => 1,
        };
        out.write_all(&[enc, loss, rule])?;
        for x in self.mean.iter().chain(self.raw_variance.iter()) {
            out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 5];
        read_exact(&mut input, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut u = [0usize; 4];
        for slot in &mut u {
            let mut b = [0u8; 4];
            read_exact(&mut input, &mut b)?;
            *slot = u32::from_le_bytes(b) as usize;
        }
        let [dim, layers, num_users, num_items] = u;
        let mut sel = [0u8; 3];
        read_exact(&mut input, &mut sel)?;
        let encoder = match sel[0] {
            0 => EncoderKind::Wgat,
            1 => EncoderKind::LightgcnGauss,
            x => return Err(Error::Format(format!("unknown encoder tag {x}"))),
        };
        let loss = match sel[1] {
            0 => LossKind::BprOnly,
            1 => LossKind::BprWpc,
            2 => LossKind::BprKlContrastive,
            x => return Err(Error::Format(format!("unknown loss tag {x}"))),
        };
        let variance_rule = match sel[2] {
            0 => VarianceRule::ASquared,
            1 => VarianceRule::ASingle,
            x => return Err(Error::Format(format!("unknown variance rule tag {x}"))),
        };
        let rows = num_users + num_items;
        let mut table = || -> Result<Array2<f64>> {
            let mut buf = vec![0u8; rows * dim * 8];
            read_exact(&mut input, &mut buf)?;
            let vals = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(Array2::from_shape_vec((rows, dim), vals).expect("shape matches buffer"))
        };
        let mean = table()?;
        let raw_variance = table()?;
        Ok(Self {
            layers,
            encoder,
            loss,
            variance_rule,
            num_users,
            num_items,
            mean,
            raw_variance,
        })
    }
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<()> {
    input
        .read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))
}

/// Settings of the full-objective gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub users: usize,
    pub items: usize,
    pub edges: usize,
    pub dim: usize,
    pub samples: usize,
    pub step: f64,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            users: 5,
            items: 7,
            edges: 20,
            dim: 16,
            samples: 200,
            step: 1e-5,
            seed: 0,
            train: TrainConfig {
                lambda: 1e-2,
                ..TrainConfig::default()
            },
        }
    }
}

/// Compares the analytic gradient of the whole objective (reparameterization,
/// attention, propagation, BPR, contrastive term, regularizer) with central
/// differences on a random toy graph.
pub fn gradient_check(cfg: &GradcheckConfig) -> Result<FdReport> {
    let set = crate::synth::toy_interactions(cfg.users, cfg.items, cfg.edges, cfg.seed)?;
    let graph = build_graph(&set)?;
    let encoder = Encoder::new(&graph, cfg.train.encoder_config());
    let loss_cfg = cfg.train.loss_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let rows = graph.num_nodes();
    let mean = Array2::from_shape_simple_fn((rows, cfg.dim), || rng.gen_range(-1.0..1.0));
    let raw = Array2::from_shape_simple_fn((rows, cfg.dim), || rng.gen_range(-1.0..1.5));
    let batch = sample_triplets(&graph, 6, &mut rng);
    let nu = graph.num_users();
    let step = loss_and_gradients(&mean, &raw, &encoder, nu, &batch, &loss_cfg)?;
    let n = mean.len();
    let x: Vec<f64> = mean.iter().chain(raw.iter()).copied().collect();
    let analytic: Vec<f64> = step.grad_mean.iter().chain(step.grad_raw.iter()).copied().collect();
    let shape = mean.dim();
    let loss = |p: &[f64]| -> f64 {
        let m = Array2::from_shape_vec(shape, p[..n].to_vec()).unwrap();
        let r = Array2::from_shape_vec(shape, p[n..].to_vec()).unwrap();
        loss_and_gradients(&m, &r, &encoder, nu, &batch, &loss_cfg)
            .map(|s| s.loss.total)
            .unwrap_or(f64::NAN)
    };
    Ok(finite_diff_check(loss, &x, &analytic, cfg.step, cfg.samples, cfg.seed))
}
