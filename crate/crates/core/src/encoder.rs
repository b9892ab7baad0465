//! Graph encoders that turn layer-0 Gaussian tables into final node embeddings.
//!
//! W-GAT attention weights every neighbor by `softmax(−W2²)` over the node's
//! neighbor row, computed once per forward pass from the layer-0 tables. Means
//! then move one hop per layer (`Ã μ`) while variances move two hops per layer
//! (`Ã(Ã Σ)`), so a user's variance only ever mixes with other users'
//! variances. The single-hop variance rule and a Gaussian LightGCN are kept for
//! the ablation and encoder-comparison runs.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{w2_squared_parts, GaussianEmbedding, VARIANCE_FLOOR};
use crate::grad::{SpmmWeights, Tape, Var};
use crate::graph::InteractionGraph;
use crate::sparse::SparsePattern;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Wgat,
    LightgcnGauss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceRule {
    /// Two attention hops per layer (`Ã²`).
    ASquared,
    /// One attention hop per layer (`Ã`), the ablation variant.
    ASingle,
}

impl FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wgat" => Ok(Self::Wgat),
            "lightgcn_gauss" | "lightgcn" => Ok(Self::LightgcnGauss),
            other => Err(Error::invalid("encoder", format!("unknown encoder `{other}` (wgat, lightgcn_gauss)"))),
        }
    }
}

impl FromStr for VarianceRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a2" | "a_squared" => Ok(Self::ASquared),
            "a1" | "a" | "a_single" => Ok(Self::ASingle),
            other => Err(Error::invalid("variance_rule", format!("unknown rule `{other}` (a2, a1)"))),
        }
    }
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Wgat => "wgat",
            Self::LightgcnGauss => "lightgcn_gauss",
        }
    }
}

impl VarianceRule {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ASquared => "a2",
            Self::ASingle => "a1",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub layers: usize,
    pub variance_rule: VarianceRule,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Wgat,
            layers: 2,
            variance_rule: VarianceRule::ASquared,
        }
    }
}

/// Mean and (materialized, positive) variance tables over the joint node space.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeTables {
    pub mean: Array2<f64>,
    pub variance: Array2<f64>,
}

impl NodeTables {
    pub fn new(mean: Array2<f64>, variance: Array2<f64>) -> Result<Self> {
        if mean.dim() != variance.dim() {
            return Err(Error::DimensionMismatch {
                left: mean.len(),
                right: variance.len(),
            });
        }
        Ok(Self { mean, variance })
    }

    pub fn num_nodes(&self) -> usize {
        self.mean.nrows()
    }

    pub fn dim(&self) -> usize {
        self.mean.ncols()
    }

    pub fn embedding(&self, node: usize) -> GaussianEmbedding {
        GaussianEmbedding::new(self.mean.row(node).to_vec(), self.variance.row(node).to_vec())
            .expect("node tables hold positive variances")
    }

    #[inline]
    pub fn w2_squared(&self, a: usize, b: usize) -> f64 {
        w2_squared_parts(
            self.mean.row(a).as_slice().unwrap(),
            self.variance.row(a).as_slice().unwrap(),
            self.mean.row(b).as_slice().unwrap(),
            self.variance.row(b).as_slice().unwrap(),
        )
    }
}

/// Row-stochastic attention weights over the graph adjacency.
#[derive(Debug, Clone)]
pub struct AttentionMatrix {
    pattern: Arc<SparsePattern>,
    weights: Vec<f64>,
}

impl AttentionMatrix {
    pub fn pattern(&self) -> &SparsePattern {
        &self.pattern
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weights of row `v`, aligned with `pattern().row(v)`.
    pub fn row_weights(&self, v: usize) -> &[f64] {
        &self.weights[self.pattern.row_range(v)]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.pattern.num_rows())
            .map(|v| self.row_weights(v).iter().sum())
            .collect()
    }

    /// `Ã²` as per-row maps from column to weight.
    pub fn squared(&self) -> Vec<BTreeMap<u32, f64>> {
        (0..self.pattern.num_rows())
            .map(|v| {
                let mut row = BTreeMap::new();
                for (&w, &a) in self.pattern.row(v).iter().zip(self.row_weights(v)) {
                    for (&x, &b) in self.pattern.row(w as usize).iter().zip(self.row_weights(w as usize)) {
                        *row.entry(x).or_insert(0.0) += a * b;
                    }
                }
                row
            })
            .collect()
    }
}

/// Direct (tape-free) attention computation with max-shifted softmax per row.
pub fn compute_attention(tables: &NodeTables, graph: &InteractionGraph) -> Result<AttentionMatrix> {
    if graph.num_nodes() == 0 {
        return Err(Error::Contract("attention over an empty graph".into()));
    }
    if tables.num_nodes() != graph.num_nodes() {
        return Err(Error::DimensionMismatch {
            left: tables.num_nodes(),
            right: graph.num_nodes(),
        });
    }
    let pattern = Arc::new(graph.adjacency());
    let mut weights = vec![0.0; pattern.nnz()];
    for v in 0..pattern.num_rows() {
        let range = pattern.row_range(v);
        let logits: Vec<f64> = pattern
            .row(v)
            .iter()
            .map(|&w| -tables.w2_squared(v, w as usize))
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (slot, e) in weights[range].iter_mut().zip(exps) {
            *slot = e / z;
        }
    }
    Ok(AttentionMatrix { pattern, weights })
}

/// Per-layer and layer-averaged tables.
#[derive(Debug, Clone)]
pub struct LayerStack {
    pub layer_means: Vec<Array2<f64>>,
    pub layer_variances: Vec<Array2<f64>>,
    pub output: NodeTables,
    pub attention: Option<AttentionMatrix>,
}

/// Tape handles produced by [`Encoder::record`].
#[derive(Debug, Clone)]
pub struct RecordedForward {
    pub layer_means: Vec<Var>,
    pub layer_variances: Vec<Var>,
    pub mean: Var,
    pub variance: Var,
    pub attention: Option<Var>,
}

/// Graph-bound encoder: caches the adjacency and the LightGCN coefficients.
#[derive(Debug, Clone)]
pub struct Encoder {
    pattern: Arc<SparsePattern>,
    edge_rows: Vec<u32>,
    gcn_weights: Arc<Vec<f64>>,
    config: EncoderConfig,
}

impl Encoder {
    pub fn new(graph: &InteractionGraph, config: EncoderConfig) -> Self {
        let pattern = Arc::new(graph.adjacency());
        let edge_rows = pattern.row_of_entries();
        let degrees = graph.degrees();
        let gcn_weights = edge_rows
            .iter()
            .zip(pattern.cols())
            .map(|(&v, &w)| 1.0 / ((degrees[v as usize] * degrees[w as usize]) as f64).sqrt())
            .collect();
        Self {
            pattern,
            edge_rows,
            gcn_weights: Arc::new(gcn_weights),
            config,
        }
    }

    pub fn config(&self) -> EncoderConfig {
        self.config
    }

    pub fn pattern(&self) -> &Arc<SparsePattern> {
        &self.pattern
    }

    /// Records the forward pass for layer-0 `mean` and (positive) `variance`.
    pub fn record(&self, tape: &mut Tape, mean: Var, variance: Var) -> RecordedForward {
        let k = self.config.layers;
        let mut layer_means = vec![mean];
        let mut layer_variances = vec![variance];
        let (weights, attention) = match self.config.kind {
            EncoderKind::Wgat => {
                let dist = tape.pair_w2(mean, variance, self.edge_rows.clone(), self.pattern.cols().to_vec());
                let logits = tape.scale(dist, -1.0);
                let alpha = tape.edge_softmax(logits, self.pattern.clone());
                (SpmmWeights::Var(alpha), Some(alpha))
            }
            EncoderKind::LightgcnGauss => (SpmmWeights::Fixed(self.gcn_weights.clone()), None),
        };
        let two_hop = self.config.kind == EncoderKind::Wgat
            && self.config.variance_rule == VarianceRule::ASquared;
        for _ in 0..k {
            let m_prev = *layer_means.last().unwrap();
            let v_prev = *layer_variances.last().unwrap();
            layer_means.push(tape.spmm(weights.clone(), self.pattern.clone(), m_prev));
            let mut v_next = tape.spmm(weights.clone(), self.pattern.clone(), v_prev);
            if two_hop {
                v_next = tape.spmm(weights.clone(), self.pattern.clone(), v_next);
            }
            layer_variances.push(v_next);
        }
        let c = 1.0 / (k + 1) as f64;
        let mean_out = tape.weighted_sum(layer_means.iter().map(|&v| (v, c)).collect());
        let mut var_out = tape.weighted_sum(layer_variances.iter().map(|&v| (v, c)).collect());
        if self.config.kind == EncoderKind::LightgcnGauss {
            var_out = tape.clamp_min(var_out, VARIANCE_FLOOR);
        }
        RecordedForward {
            layer_means,
            layer_variances,
            mean: mean_out,
            variance: var_out,
            attention,
        }
    }

    /// Evaluates the forward pass without keeping the tape.
    pub fn forward(&self, tables: &NodeTables) -> Result<LayerStack> {
        if tables.num_nodes() != self.pattern.num_rows() {
            return Err(Error::DimensionMismatch {
                left: tables.num_nodes(),
                right: self.pattern.num_rows(),
            });
        }
        let mut tape = Tape::new();
        let m = tape.leaf(tables.mean.clone());
        let v = tape.leaf(tables.variance.clone());
        let rec = self.record(&mut tape, m, v);
        let attention = rec.attention.map(|a| AttentionMatrix {
            pattern: self.pattern.clone(),
            weights: tape.value(a).iter().copied().collect(),
        });
        Ok(LayerStack {
            layer_means: rec.layer_means.iter().map(|&x| tape.value(x).clone()).collect(),
            layer_variances: rec.layer_variances.iter().map(|&x| tape.value(x).clone()).collect(),
            output: NodeTables {
                mean: tape.value(rec.mean).clone(),
                variance: tape.value(rec.variance).clone(),
            },
            attention,
        })
    }
}

pub fn wgat_forward(
    tables: &NodeTables,
    graph: &InteractionGraph,
    layers: usize,
    variance_rule: VarianceRule,
) -> Result<LayerStack> {
    let config = EncoderConfig {
        kind: EncoderKind::Wgat,
        layers,
        variance_rule,
    };
    Encoder::new(graph, config).forward(tables)
}

pub fn lightgcn_gauss_forward(tables: &NodeTables, graph: &InteractionGraph, layers: usize) -> Result<LayerStack> {
    let config = EncoderConfig {
        kind: EncoderKind::LightgcnGauss,
        layers,
        variance_rule: VarianceRule::ASingle,
    };
    Encoder::new(graph, config).forward(tables)
}
