//! Reverse-mode differentiation over a tape of matrix-valued primitives.
//!
//! Every value on the tape is an `Array2<f64>`; column vectors are `n × 1` and
//! scalars `1 × 1`. Each primitive records the inputs its adjoint needs and the
//! adjoints are replayed in reverse insertion order by [`Tape::backward`].
//! Contributions from several consumers of a value are summed.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gauss::{sigmoid, softplus, w2_squared_sd};
use crate::sparse::SparsePattern;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Edge weights of a sparse product: either differentiable or fixed.
#[derive(Debug, Clone)]
pub enum SpmmWeights {
    Var(Var),
    Fixed(Arc<Vec<f64>>),
}

/// Distance between Gaussian rows used by the fused contrastive primitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairDistance {
    W2,
    SymmetricKl,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Softplus { x: Var },
    ClampMin { x: Var, floor: f64 },
    Scale { x: Var, c: f64 },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    WeightedSum { terms: Vec<(Var, f64)> },
    Sigmoid { x: Var },
    PairW2 { mean: Var, var: Var, a: Vec<u32>, b: Vec<u32> },
    CrossW2 { mean: Var, var: Var, rows: Vec<u32>, cols: Vec<u32> },
    CrossSymKl { mean: Var, var: Var, rows: Vec<u32>, cols: Vec<u32> },
    InBatchContrastive { mean: Var, var: Var, rows: Vec<u32>, cols: Vec<u32>, dist: PairDistance, dloss_ddist: Array2<f64> },
    EdgeSoftmax { x: Var, pattern: Arc<SparsePattern> },
    Spmm { weights: SpmmWeights, pattern: Arc<SparsePattern>, x: Var },
    RowLogSumExp { x: Var },
    Diagonal { x: Var },
    Mean { x: Var },
    Sum { x: Var },
    SumSquaresRows { x: Var, rows: Vec<u32> },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn col(v: Vec<f64>) -> Array2<f64> {
    let n = v.len();
    Array2::from_shape_vec((n, 1), v).expect("column shape")
}

fn scalar(x: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), x)
}

/// Row-wise standard deviations of a variance table.
fn sd_table(var: &Array2<f64>) -> Array2<f64> {
    var.mapv(f64::sqrt)
}

/// `[mean | sd]` rows for the given node ids.
fn gather_concat(mean: &Array2<f64>, sd: &Array2<f64>, ids: &[u32]) -> Array2<f64> {
    let d = mean.ncols();
    let mut out = Array2::zeros((ids.len(), 2 * d));
    for (r, &id) in ids.iter().enumerate() {
        out.slice_mut(s![r, ..d]).assign(&mean.row(id as usize));
        out.slice_mut(s![r, d..]).assign(&sd.row(id as usize));
    }
    out
}

/// Gathers `[mean | sd]` rows for both index lists and shifts them by their
/// joint centroid. Pairwise distances are unchanged; the expansion
/// `‖x‖² + ‖y‖² − 2x·y` loses far less precision on centered data.
fn gather_centered(
    mean: &Array2<f64>,
    sd: &Array2<f64>,
    rows: &[u32],
    cols: &[u32],
) -> (Array2<f64>, Array2<f64>) {
    let mut xr = gather_concat(mean, sd, rows);
    let mut xc = gather_concat(mean, sd, cols);
    let n = (rows.len() + cols.len()).max(1) as f64;
    let center = (xr.sum_axis(Axis(0)) + xc.sum_axis(Axis(0))) / n;
    xr -= &center;
    xc -= &center;
    (xr, xc)
}

fn row_sq_norms(x: &Array2<f64>) -> Array1<f64> {
    x.rows().into_iter().map(|r| r.dot(&r)).collect()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `softplus(x) + floor`, elementwise.
    pub fn softplus(&mut self, x: Var, floor: f64) -> Var {
        let value = self.value(x).mapv(|t| softplus(t) + floor);
        self.push(value, Op::Softplus { x })
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let value = self.value(x).mapv(|t| t.max(floor));
        self.push(value, Op::ClampMin { x, floor })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) * c;
        self.push(value, Op::Scale { x, c })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub { a, b })
    }

    /// `Σ c_k · x_k` over equally shaped inputs.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let mut value = Array2::zeros(self.value(terms[0].0).dim());
        for &(v, c) in &terms {
            value.scaled_add(c, self.value(v));
        }
        self.push(value, Op::WeightedSum { terms })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        self.push(value, Op::Sigmoid { x })
    }

    /// Squared W2 distance between rows `a[k]` and `b[k]` of a (mean, variance)
    /// table pair; returns a column of length `a.len()`.
    pub fn pair_w2(&mut self, mean: Var, var: Var, a: Vec<u32>, b: Vec<u32>) -> Var {
        assert_eq!(a.len(), b.len(), "pair_w2: index lists differ in length");
        let m = self.value(mean);
        let sd = sd_table(self.value(var));
        let out: Vec<f64> = a
            .iter()
            .zip(&b)
            .map(|(&i, &j)| {
                let (i, j) = (i as usize, j as usize);
                w2_squared_sd(
                    m.row(i).as_slice().unwrap(),
                    sd.row(i).as_slice().unwrap(),
                    m.row(j).as_slice().unwrap(),
                    sd.row(j).as_slice().unwrap(),
                )
            })
            .collect();
        self.push(col(out), Op::PairW2 { mean, var, a, b })
    }

    /// Dense `rows × cols` matrix of squared W2 distances.
    pub fn cross_w2(&mut self, mean: Var, var: Var, rows: Vec<u32>, cols: Vec<u32>) -> Var {
        let value = cross_w2_matrix(self.value(mean), self.value(var), &rows, &cols);
        self.push(value, Op::CrossW2 { mean, var, rows, cols })
    }

    /// Dense matrix of symmetrized KL divergences `½(KL(r‖c) + KL(c‖r))`.
    pub fn cross_sym_kl(&mut self, mean: Var, var: Var, rows: Vec<u32>, cols: Vec<u32>) -> Var {
        let value = cross_sym_kl_matrix(self.value(mean), self.value(var), &rows, &cols);
        self.push(value, Op::CrossSymKl { mean, var, rows, cols })
    }

    /// `mean_a [ log Σ_b exp f_ab − f_aa ]` with `f = σ(−dist)/τ` between
    /// `rows[a]` and `cols[b]`; the diagonal holds the positive pairs.
    ///
    /// Equivalent to composing the cross distance, sigmoid, scale, row
    /// log-sum-exp and diagonal primitives, but keeps a single `B × B` buffer.
    pub fn in_batch_contrastive(
        &mut self,
        mean: Var,
        var: Var,
        rows: Vec<u32>,
        cols: Vec<u32>,
        dist: PairDistance,
        tau: f64,
    ) -> Var {
        assert_eq!(rows.len(), cols.len(), "in_batch_contrastive: rows and cols differ in length");
        assert!(!rows.is_empty(), "in_batch_contrastive: empty batch");
        let (m, v) = (self.value(mean), self.value(var));
        let mut buf = match dist {
            PairDistance::W2 => cross_w2_matrix(m, v, &rows, &cols),
            PairDistance::SymmetricKl => cross_sym_kl_matrix(m, v, &rows, &cols),
        };
        let n = rows.len() as f64;
        let mut total = 0.0;
        for (a, mut row) in buf.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|x| sigmoid(-x));
            let max = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x)) / tau;
            let lse = max + row.iter().map(|&x| (x / tau - max).exp()).sum::<f64>().ln();
            total += lse - row[a] / tau;
            // ∂loss/∂f_ab = (softmax_ab − δ_ab)/B and ∂f/∂dist = −σ(1−σ)/τ
            for (c, x) in row.iter_mut().enumerate() {
                let sg = *x;
                let p = (sg / tau - lse).exp() - if c == a { 1.0 } else { 0.0 };
                *x = -p * sg * (1.0 - sg) / (tau * n);
            }
        }
        self.push(
            scalar(total / n),
            Op::InBatchContrastive {
                mean,
                var,
                rows,
                cols,
                dist,
                dloss_ddist: buf,
            },
        )
    }

    /// Softmax within each row of a sparse pattern; `x` holds one logit per
    /// stored entry. Rows are max-shifted before exponentiation.
    pub fn edge_softmax(&mut self, x: Var, pattern: Arc<SparsePattern>) -> Var {
        let logits = self.value(x);
        assert_eq!(logits.nrows(), pattern.nnz(), "edge_softmax: logits/pattern mismatch");
        let logits = logits.column(0);
        let mut out = vec![0.0; pattern.nnz()];
        for r in 0..pattern.num_rows() {
            let range = pattern.row_range(r);
            if range.is_empty() {
                continue;
            }
            let max = range
                .clone()
                .map(|e| logits[e])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in range.clone() {
                out[e] = (logits[e] - max).exp();
                z += out[e];
            }
            for e in range {
                out[e] /= z;
            }
        }
        self.push(col(out), Op::EdgeSoftmax { x, pattern })
    }

    /// Sparse-times-dense product; rows with no stored entries pass their
    /// input row through unchanged.
    pub fn spmm(&mut self, weights: SpmmWeights, pattern: Arc<SparsePattern>, x: Var) -> Var {
        let input = self.value(x);
        assert_eq!(input.nrows(), pattern.num_rows(), "spmm: row count mismatch");
        let w: &[f64] = match &weights {
            SpmmWeights::Var(v) => self.value(*v).as_slice().expect("contiguous weights"),
            SpmmWeights::Fixed(w) => w,
        };
        let value = spmm_forward(w, &pattern, input.view());
        self.push(value, Op::Spmm { weights, pattern, x })
    }

    pub fn row_logsumexp(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self
            .value(x)
            .rows()
            .into_iter()
            .map(|row| {
                let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                max + row.iter().map(|&t| (t - max).exp()).sum::<f64>().ln()
            })
            .collect();
        self.push(col(out), Op::RowLogSumExp { x })
    }

    pub fn diagonal(&mut self, x: Var) -> Var {
        let value = col(self.value(x).diag().to_vec());
        self.push(value, Op::Diagonal { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = scalar(v.sum() / v.len() as f64);
        self.push(value, Op::Mean { x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = scalar(self.value(x).sum());
        self.push(value, Op::Sum { x })
    }

    /// Sum of squared entries over the listed rows.
    pub fn sum_squares_rows(&mut self, x: Var, rows: Vec<u32>) -> Var {
        let v = self.value(x);
        let total = rows
            .iter()
            .map(|&r| {
                let row = v.row(r as usize);
                row.dot(&row)
            })
            .sum();
        self.push(scalar(total), Op::SumSquaresRows { x, rows })
    }

    /// Replays adjoints from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).dim() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).dim()
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Array2<f64>>], v: Var) -> &'a mut Array2<f64> {
        grads[v.0].get_or_insert_with(|| Array2::zeros(self.value(v).dim()))
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Softplus { x } => {
                let xv = self.value(*x);
                let gx = self.slot(grads, *x);
                Zip::from(gx)
                    .and(g)
                    .and(xv)
                    .for_each(|o, &gi, &t| *o += gi * sigmoid(t));
            }
            Op::ClampMin { x, floor } => {
                let xv = self.value(*x);
                let gx = self.slot(grads, *x);
                Zip::from(gx).and(g).and(xv).for_each(|o, &gi, &t| {
                    if t > *floor {
                        *o += gi;
                    }
                });
            }
            Op::Scale { x, c } => self.slot(grads, *x).scaled_add(*c, g),
            Op::Add { a, b } => {
                *self.slot(grads, *a) += g;
                *self.slot(grads, *b) += g;
            }
            Op::Sub { a, b } => {
                *self.slot(grads, *a) += g;
                *self.slot(grads, *b) -= g;
            }
            Op::WeightedSum { terms } => {
                for &(v, c) in terms {
                    self.slot(grads, v).scaled_add(c, g);
                }
            }
            Op::Sigmoid { x } => {
                let y = &node.value;
                let gx = self.slot(grads, *x);
                Zip::from(gx)
                    .and(g)
                    .and(y)
                    .for_each(|o, &gi, &s| *o += gi * s * (1.0 - s));
            }
            Op::PairW2 { mean, var, a, b } => {
                self.pair_w2_adjoint(*mean, *var, a, b, g, grads);
            }
            Op::CrossW2 {
                mean,
                var,
                rows,
                cols,
            } => self.cross_w2_adjoint(*mean, *var, rows, cols, g, grads),
            Op::CrossSymKl {
                mean,
                var,
                rows,
                cols,
            } => self.cross_kl_adjoint(*mean, *var, rows, cols, g, grads),
            Op::InBatchContrastive {
                mean,
                var,
                rows,
                cols,
                dist,
                dloss_ddist,
            } => {
                let gd = dloss_ddist * g[[0, 0]];
                match dist {
                    PairDistance::W2 => self.cross_w2_adjoint(*mean, *var, rows, cols, &gd, grads),
                    PairDistance::SymmetricKl => self.cross_kl_adjoint(*mean, *var, rows, cols, &gd, grads),
                }
            }
            Op::EdgeSoftmax { x, pattern } => {
                let y = node.value.column(0);
                let gy = g.column(0);
                let gx = self.slot(grads, *x);
                for r in 0..pattern.num_rows() {
                    let range = pattern.row_range(r);
                    let dot: f64 = range.clone().map(|e| gy[e] * y[e]).sum();
                    for e in range {
                        gx[[e, 0]] += y[e] * (gy[e] - dot);
                    }
                }
            }
            Op::Spmm {
                weights,
                pattern,
                x,
            } => {
                let xv = self.value(*x);
                let d = xv.ncols();
                let xs = flat(xv);
                let gs = flat(g);
                let w: &[f64] = match weights {
                    SpmmWeights::Var(v) => self.value(*v).as_slice().unwrap(),
                    SpmmWeights::Fixed(w) => w,
                };
                if let SpmmWeights::Var(wv) = weights {
                    let gw = flat_mut(self.slot(grads, *wv));
                    for r in 0..pattern.num_rows() {
                        let gr = &gs[r * d..(r + 1) * d];
                        for e in pattern.row_range(r) {
                            let c = pattern.cols()[e] as usize;
                            gw[e] += dot(gr, &xs[c * d..(c + 1) * d]);
                        }
                    }
                }
                let gx = flat_mut(self.slot(grads, *x));
                for r in 0..pattern.num_rows() {
                    let range = pattern.row_range(r);
                    let gr = &gs[r * d..(r + 1) * d];
                    if range.is_empty() {
                        axpy(&mut gx[r * d..(r + 1) * d], 1.0, gr);
                        continue;
                    }
                    for e in range {
                        let c = pattern.cols()[e] as usize;
                        axpy(&mut gx[c * d..(c + 1) * d], w[e], gr);
                    }
                }
            }
            Op::RowLogSumExp { x } => {
                let xv = self.value(*x);
                let lse = node.value.column(0);
                let gx = self.slot(grads, *x);
                for (r, (mut row, xr)) in gx.rows_mut().into_iter().zip(xv.rows()).enumerate() {
                    let (gr, l) = (g[[r, 0]], lse[r]);
                    Zip::from(&mut row).and(xr).for_each(|o, &t| *o += gr * (t - l).exp());
                }
            }
            Op::Diagonal { x } => {
                let gx = self.slot(grads, *x);
                for k in 0..g.nrows() {
                    gx[[k, k]] += g[[k, 0]];
                }
            }
            Op::Mean { x } => {
                let n = self.value(*x).len() as f64;
                let gv = g[[0, 0]] / n;
                self.slot(grads, *x).mapv_inplace(|t| t + gv);
            }
            Op::Sum { x } => {
                let gv = g[[0, 0]];
                self.slot(grads, *x).mapv_inplace(|t| t + gv);
            }
            Op::SumSquaresRows { x, rows } => {
                let xv = self.value(*x);
                let gv = g[[0, 0]];
                let gx = self.slot(grads, *x);
                for &r in rows {
                    gx.row_mut(r as usize).scaled_add(2.0 * gv, &xv.row(r as usize));
                }
            }
        }
    }

    fn pair_w2_adjoint(
        &self,
        mean: Var,
        var: Var,
        a: &[u32],
        b: &[u32],
        g: &Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
    ) {
        let mv = self.value(mean);
        let d = mv.ncols();
        let m = flat(mv);
        let sd_arr = sd_table(self.value(var));
        let sd = flat(&sd_arr);
        let mut gm_arr = grads[mean.0].take().unwrap_or_else(|| Array2::zeros(mv.dim()));
        let mut gv_arr = grads[var.0].take().unwrap_or_else(|| Array2::zeros(mv.dim()));
        let gm = flat_mut(&mut gm_arr);
        let gv = flat_mut(&mut gv_arr);
        for (k, (&i, &j)) in a.iter().zip(b).enumerate() {
            let gk = g[[k, 0]];
            if gk == 0.0 {
                continue;
            }
            let (i, j) = (i as usize * d, j as usize * d);
            for t in 0..d {
                let dm = 2.0 * gk * (m[i + t] - m[j + t]);
                gm[i + t] += dm;
                gm[j + t] -= dm;
                // ∂/∂σ_a = 1 − √(σ_b/σ_a)
                let (si, sj) = (sd[i + t], sd[j + t]);
                gv[i + t] += gk * (1.0 - sj / si);
                gv[j + t] += gk * (1.0 - si / sj);
            }
        }
        grads[mean.0] = Some(gm_arr);
        grads[var.0] = Some(gv_arr);
    }

    fn cross_w2_adjoint(
        &self,
        mean: Var,
        var: Var,
        rows: &[u32],
        cols: &[u32],
        g: &Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
    ) {
        let m = self.value(mean);
        let sd = sd_table(self.value(var));
        let d = m.ncols();
        let (xr, xc) = gather_centered(m, &sd, rows, cols);
        let row_sums = g.sum_axis(Axis(1));
        let col_sums = g.sum_axis(Axis(0));
        let mut gxr = g.dot(&xc);
        let mut gxc = g.t().dot(&xr);
        for (r, mut row) in gxr.rows_mut().into_iter().enumerate() {
            Zip::from(&mut row)
                .and(xr.row(r))
                .for_each(|o, &x| *o = 2.0 * (row_sums[r] * x - *o));
        }
        for (c, mut row) in gxc.rows_mut().into_iter().enumerate() {
            Zip::from(&mut row)
                .and(xc.row(c))
                .for_each(|o, &x| *o = 2.0 * (col_sums[c] * x - *o));
        }
        let mut gm = grads[mean.0].take().unwrap_or_else(|| Array2::zeros(m.dim()));
        let mut gv = grads[var.0].take().unwrap_or_else(|| Array2::zeros(m.dim()));
        for (ids, gx) in [(rows, &gxr), (cols, &gxc)] {
            for (r, &id) in ids.iter().enumerate() {
                let id = id as usize;
                for t in 0..d {
                    gm[[id, t]] += gx[[r, t]];
                    gv[[id, t]] += gx[[r, d + t]] / (2.0 * sd[[id, t]]);
                }
            }
        }
        grads[mean.0] = Some(gm);
        grads[var.0] = Some(gv);
    }

    fn cross_kl_adjoint(
        &self,
        mean: Var,
        var: Var,
        rows: &[u32],
        cols: &[u32],
        g: &Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
    ) {
        let (mv, vv) = (self.value(mean), self.value(var));
        let d = mv.ncols();
        let (m, v) = (flat(mv), flat(vv));
        let inv_arr = vv.mapv(f64::recip);
        let inv = flat(&inv_arr);
        let mut gm_arr = grads[mean.0].take().unwrap_or_else(|| Array2::zeros(mv.dim()));
        let mut gv_arr = grads[var.0].take().unwrap_or_else(|| Array2::zeros(vv.dim()));
        let gm = flat_mut(&mut gm_arr);
        let gv = flat_mut(&mut gv_arr);
        for (r, &i) in rows.iter().enumerate() {
            let i = i as usize * d;
            for (c, &j) in cols.iter().enumerate() {
                let gk = g[[r, c]];
                if gk == 0.0 {
                    continue;
                }
                let j = j as usize * d;
                for t in 0..d {
                    let dm = m[i + t] - m[j + t];
                    let (pi, pj) = (inv[i + t], inv[j + t]);
                    let (vi, vj) = (v[i + t], v[j + t]);
                    let gmean = 0.5 * gk * dm * (pi + pj);
                    gm[i + t] += gmean;
                    gm[j + t] -= gmean;
                    gv[i + t] += 0.25 * gk * (pj - (dm * dm + vj) * pi * pi);
                    gv[j + t] += 0.25 * gk * (pi - (dm * dm + vi) * pj * pj);
                }
            }
        }
        grads[mean.0] = Some(gm_arr);
        grads[var.0] = Some(gv_arr);
    }
}

fn cross_w2_matrix(mean: &Array2<f64>, var: &Array2<f64>, rows: &[u32], cols: &[u32]) -> Array2<f64> {
    let sd = sd_table(var);
    let (xr, xc) = gather_centered(mean, &sd, rows, cols);
    let nr = row_sq_norms(&xr);
    let nc = row_sq_norms(&xc);
    let mut value = xr.dot(&xc.t());
    for (r, mut row) in value.rows_mut().into_iter().enumerate() {
        Zip::from(&mut row)
            .and(&nc)
            .for_each(|g, &n| *g = (nr[r] + n - 2.0 * *g).max(0.0));
    }
    value
}

fn cross_sym_kl_matrix(mean: &Array2<f64>, var: &Array2<f64>, rows: &[u32], cols: &[u32]) -> Array2<f64> {
    let d = mean.ncols();
    let (m, v) = (flat(mean), flat(var));
    let inv_arr = var.mapv(f64::recip);
    let inv = flat(&inv_arr);
    let mut out = Array2::zeros((rows.len(), cols.len()));
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        let i = rows[r] as usize * d;
        for (o, &j) in row.iter_mut().zip(cols) {
            let j = j as usize * d;
            let mut acc = 0.0;
            for t in 0..d {
                let dm = m[i + t] - m[j + t];
                let (pi, pj) = (inv[i + t], inv[j + t]);
                acc += dm * dm * (pi + pj) + v[i + t] * pj + v[j + t] * pi - 2.0;
            }
            *o = 0.25 * acc;
        }
    }
    out
}

fn spmm_forward(w: &[f64], pattern: &SparsePattern, x: ArrayView2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let xs = x.as_slice().expect("standard layout");
    let mut out = vec![0.0; n * d];
    for r in 0..n {
        let range = pattern.row_range(r);
        let dst = &mut out[r * d..(r + 1) * d];
        if range.is_empty() {
            dst.copy_from_slice(&xs[r * d..(r + 1) * d]);
            continue;
        }
        for e in range {
            let c = pattern.cols()[e] as usize;
            axpy(dst, w[e], &xs[c * d..(c + 1) * d]);
        }
    }
    Array2::from_shape_vec((n, d), out).expect("shape matches buffer")
}

fn flat(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn flat_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in dst.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when nothing downstream of the root used it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v` with untouched values reported as exact zeros.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Array2<f64> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(tape.value(v).dim()))
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_coordinate: Option<usize>,
    pub evaluated: usize,
    pub non_finite: usize,
    pub step: f64,
}

impl FdReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.non_finite == 0 && self.max_rel_error < tol
    }

    pub fn step_in_recommended_range(&self) -> bool {
        (1e-6..=1e-4).contains(&self.step)
    }
}

/// Compares `analytic` against central differences of `loss` at `x` on
/// `samples` randomly chosen coordinates. Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(
    mut loss: F,
    x: &[f64],
    analytic: &[f64],
    step: f64,
    samples: usize,
    seed: u64,
) -> FdReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "finite_diff_check: gradient length mismatch");
    if !(1e-6..=1e-4).contains(&step) {
        log::warn!("finite-difference step {step:e} is outside [1e-6, 1e-4]; expect truncation or rounding error");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<usize> = if samples >= x.len() {
        (0..x.len()).collect()
    } else {
        let mut c = sample(&mut rng, x.len(), samples).into_vec();
        c.sort_unstable();
        c
    };
    let mut probe = x.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_coordinate: None,
        evaluated: coords.len(),
        non_finite: 0,
        step,
    };
    for &k in &coords {
        let orig = probe[k];
        probe[k] = orig + step;
        let plus = loss(&probe);
        probe[k] = orig - step;
        let minus = loss(&probe);
        probe[k] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[k];
        if !numeric.is_finite() || !a.is_finite() {
            report.non_finite += 1;
            report.max_rel_error = f64::INFINITY;
            report.worst_coordinate = Some(k);
            continue;
        }
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coordinate = Some(k);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::{lipschitz_score, w2_squared_parts, GaussianEmbedding};
    use ndarray::array;

    fn flat(a: &Array2<f64>) -> Vec<f64> {
        a.iter().copied().collect()
    }

    /// Builds a scalar function of one leaf and checks it against central differences.
    fn check<F>(init: Array2<f64>, build: F, tol: f64)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let shape = init.dim();
        let mut tape = Tape::new();
        let x = tape.leaf(init.clone());
        let root = build(&mut tape, x);
        let grads = tape.backward(root).unwrap();
        let analytic = flat(&grads.wrt(&tape, x));
        let report = finite_diff_check(
            |p| {
                let mut t = Tape::new();
                let x = t.leaf(Array2::from_shape_vec(shape, p.to_vec()).unwrap());
                let r = build(&mut t, x);
                t.scalar_value(r)
            },
            &flat(&init),
            &analytic,
            1e-5,
            usize::MAX,
            0,
        );
        assert!(report.passed(tol), "{report:?}");
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0, 2.0]]);
        let sq = tape.sum_squares_rows(x, vec![0]);
        let grads = tape.backward(sq).unwrap();
        assert_eq!(flat(grads.get(x).unwrap()), vec![2.0, 4.0]);
        let report = finite_diff_check(|p| p[0] * p[0] + p[1] * p[1], &[1.0, 2.0], &[2.0, 4.0], 1e-5, 2, 0);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0, 2.0]]);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn coincident_pair_has_zero_mean_gradient() {
        let mut tape = Tape::new();
        let m = tape.leaf(array![[0.3, -0.2], [0.3, -0.2]]);
        let v = tape.leaf(array![[1.5, 0.5], [1.5, 0.5]]);
        let d = tape.pair_w2(m, v, vec![0], vec![1]);
        let s = tape.sum(d);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(m).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn softmax_row_sum_has_zero_logit_gradient() {
        let pattern = Arc::new(SparsePattern::from_rows([vec![0u32, 1, 2], vec![0]]));
        let mut tape = Tape::new();
        let x = tape.leaf(array![[0.5], [-1.0], [2.0], [0.1]]);
        let y = tape.edge_softmax(x, pattern);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(x).unwrap().iter().all(|g| g.abs() < 1e-15));
        let vals = flat(tape.value(y));
        assert!((vals[0] + vals[1] + vals[2] - 1.0).abs() < 1e-15);
        assert_eq!(vals[3], 1.0);
    }

    #[test]
    fn untouched_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0]]);
        let unused = tape.leaf(array![[3.0, 4.0]]);
        let y = tape.scale(x, 2.0);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(&tape, unused), Array2::zeros((1, 2)));
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let init = array![[0.3, -1.2, 2.5], [0.0, 0.7, -0.4]];
        check(init.clone(), |t, x| {
            let a = t.softplus(x, 1e-6);
            let b = t.sigmoid(x);
            let c = t.sub(a, b);
            let d = t.scale(c, 1.7);
            let e = t.add(d, a);
            let f = t.weighted_sum(vec![(e, 0.5), (b, -2.0)]);
            let g = t.clamp_min(f, -0.3);
            t.mean(g)
        }, 1e-7);
        check(init, |t, x| {
            let l = t.row_logsumexp(x);
            let s = t.sum(l);
            let q = t.sum_squares_rows(x, vec![1, 1, 0]);
            let z = t.add(s, q);
            let z = t.scale(z, 0.1);
            let sig = t.sigmoid(z);
            t.sum(sig)
        }, 1e-7);
    }

    #[test]
    fn pair_and_cross_distances_match_finite_differences() {
        let mean = array![[0.1, -0.3, 0.8], [0.5, 0.2, -0.1], [-0.7, 0.4, 0.3], [0.2, 0.2, 0.2]];
        let raw = array![[0.2, -0.5, 1.0], [0.0, 0.3, -1.0], [1.1, -0.2, 0.4], [-0.3, 0.1, 0.0]];
        let joined = ndarray::concatenate(Axis(0), &[mean.view(), raw.view()]).unwrap();
        let build = |kind: u8| {
            move |t: &mut Tape, x: Var| {
                let (m, r) = split_leaf(t, x);
                let v = t.softplus(r, 0.1);
                let d = match kind {
                    0 => t.pair_w2(m, v, vec![0, 1, 2, 0], vec![1, 2, 3, 0]),
                    1 => t.cross_w2(m, v, vec![0, 1], vec![2, 3, 1]),
                    _ => t.cross_sym_kl(m, v, vec![0, 1], vec![2, 3, 1]),
                };
                let sq = t.sigmoid(d);
                t.sum(sq)
            }
        };
        for kind in 0..3 {
            check(joined.clone(), build(kind), 1e-6);
        }
    }

    /// Selects mean and raw-variance halves out of an `8 × 3` leaf through fixed
    /// one-hot products so both stay differentiable with respect to it.
    #[test]
    fn fused_contrastive_matches_composed_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        use rand::Rng;
        let mean = Array2::from_shape_simple_fn((6, 5), || rng.gen_range(-1.0..1.0));
        let var = Array2::from_shape_simple_fn((6, 5), || rng.gen_range(0.2..2.0));
        let (rows, cols) = (vec![0u32, 1, 2, 1], vec![3u32, 4, 5, 3]);
        for (dist, tau) in [(PairDistance::W2, 0.25), (PairDistance::SymmetricKl, 0.7)] {
            let mut t = Tape::new();
            let (m, v) = (t.leaf(mean.clone()), t.leaf(var.clone()));
            let fused = t.in_batch_contrastive(m, v, rows.clone(), cols.clone(), dist, tau);
            let d = match dist {
                PairDistance::W2 => t.cross_w2(m, v, rows.clone(), cols.clone()),
                PairDistance::SymmetricKl => t.cross_sym_kl(m, v, rows.clone(), cols.clone()),
            };
            let neg = t.scale(d, -1.0);
            let sg = t.sigmoid(neg);
            let f = t.scale(sg, 1.0 / tau);
            let lse = t.row_logsumexp(f);
            let diag = t.diagonal(f);
            let gap = t.sub(lse, diag);
            let composed = t.mean(gap);
            assert!((t.scalar_value(fused) - t.scalar_value(composed)).abs() < 1e-12);
            let (gf, gc) = (t.backward(fused).unwrap(), t.backward(composed).unwrap());
            for leaf in [m, v] {
                let (a, b) = (gf.wrt(&t, leaf), gc.wrt(&t, leaf));
                assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12), "{dist:?}");
                assert!(a.iter().any(|x| x.abs() > 1e-6));
            }
        }
    }

    fn split_leaf(t: &mut Tape, x: Var) -> (Var, Var) {
        let top = Arc::new(SparsePattern::from_rows((0..8u32).map(|r| vec![r % 4])));
        let bottom = Arc::new(SparsePattern::from_rows((0..8u32).map(|r| vec![4 + r % 4])));
        let ones = Arc::new(vec![1.0; 8]);
        let m = t.spmm(SpmmWeights::Fixed(ones.clone()), top, x);
        let r = t.spmm(SpmmWeights::Fixed(ones), bottom, x);
        (m, r)
    }

    #[test]
    fn sparse_ops_match_finite_differences() {
        let pattern = Arc::new(SparsePattern::from_rows([vec![1u32, 2], vec![0], vec![], vec![0, 1, 2]]));
        let init = array![[0.2], [-0.4], [1.3], [0.6], [0.1], [-0.2]];
        let feats = array![[1.0, -0.5], [0.3, 0.8], [-1.2, 0.4], [0.5, 0.5]];
        let p = pattern.clone();
        check(init, move |t, x| {
            let w = t.edge_softmax(x, p.clone());
            let f = t.leaf(feats.clone());
            let y = t.spmm(SpmmWeights::Var(w), p.clone(), f);
            let z = t.spmm(SpmmWeights::Var(w), p.clone(), y);
            let s = t.sigmoid(z);
            t.sum(s)
        }, 1e-7);
        let p = pattern;
        check(array![[1.0, -0.5], [0.3, 0.8], [-1.2, 0.4], [0.5, 0.5]], move |t, x| {
            let w = Arc::new(vec![0.3, 0.7, 1.0, 0.2, 0.2, 0.6]);
            let y = t.spmm(SpmmWeights::Fixed(w), p.clone(), x);
            let s = t.sigmoid(y);
            let d = t.diagonal(s);
            t.sum(d)
        }, 1e-7);
    }

    #[test]
    fn isolated_rows_pass_through() {
        let pattern = Arc::new(SparsePattern::from_rows([vec![1u32], vec![]]));
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let y = tape.spmm(SpmmWeights::Fixed(Arc::new(vec![0.5])), pattern, x);
        assert_eq!(tape.value(y), &array![[1.5, 2.0], [3.0, 4.0]]);
    }

    #[test]
    fn lipschitz_score_slope_at_zero_distance() {
        // f = (1/τ)σ(−w2); at coincident means df/dμ_a = −(1/τ)·σ'(0)·∂w2/∂μ_a = 0,
        // so perturb along variance where ∂w2/∂σ_a = 1 − √(σ_b/σ_a).
        let tau = 0.25;
        let mut tape = Tape::new();
        let m = tape.leaf(array![[0.0], [0.0]]);
        let v = tape.leaf(array![[1.0], [4.0]]);
        let d = tape.pair_w2(m, v, vec![0], vec![1]);
        let neg = tape.scale(d, -1.0);
        let s = tape.sigmoid(neg);
        let f = tape.scale(s, 1.0 / tau);
        let root = tape.sum(f);
        let grads = tape.backward(root).unwrap();
        let w2 = w2_squared_parts(&[0.0], &[1.0], &[0.0], &[4.0]);
        let sg = crate::gauss::sigmoid(-w2);
        let expected = -(1.0 / tau) * sg * (1.0 - sg) * (1.0 - 2.0);
        assert!((grads.get(v).unwrap()[[0, 0]] - expected).abs() < 1e-14);
        // value agrees with the checked wrapper
        let a = GaussianEmbedding::new(vec![0.0], vec![1.0]).unwrap();
        let b = GaussianEmbedding::new(vec![0.0], vec![4.0]).unwrap();
        assert!((tape.scalar_value(root) - lipschitz_score(&a, &b, tau).unwrap()).abs() < 1e-15);
        // and at exactly zero distance the slope factor is σ'(0) = 0.25
        assert_eq!(crate::gauss::sigmoid(0.0) * (1.0 - crate::gauss::sigmoid(0.0)), 0.25);
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let m = tape.leaf(array![[0.1, 0.4], [0.9, -0.3], [0.2, 0.2]]);
            let r = tape.leaf(array![[0.0, 0.5], [-0.5, 0.1], [0.3, 0.3]]);
            let v = tape.softplus(r, 1e-6);
            let d = tape.cross_w2(m, v, vec![0, 1], vec![2, 1, 0]);
            let l = tape.row_logsumexp(d);
            let s = tape.sum(l);
            let g = tape.backward(s).unwrap();
            (flat(g.get(m).unwrap()), flat(g.get(r).unwrap()))
        };
        assert_eq!(run(), run());
    }
}
