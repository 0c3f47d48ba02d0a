//! A small reverse-mode automatic differentiation tape over [`Matrix`].
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of
//! a scalar root with respect to every node. The op set is exactly what the
//! link-tagging model needs; structured losses (CRF, cross-entropy) are
//! single fused nodes whose local gradients are computed during the forward
//! pass.

use std::collections::HashMap;

use crate::crf::{Crf, TransitionMask};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sparse constant row mixing: `out[j] = Σ w · x[i]` over `terms[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMix {
    pub terms: Vec<Vec<(usize, f64)>>,
}

impl RowMix {
    pub fn gather(indices: &[usize]) -> Self {
        RowMix {
            terms: indices.iter().map(|&i| vec![(i, 1.0)]).collect(),
        }
    }

    pub fn means(groups: &[Vec<usize>]) -> Self {
        RowMix {
            terms: groups
                .iter()
                .map(|g| {
                    let w = 1.0 / g.len() as f64;
                    g.iter().map(|&i| (i, w)).collect()
                })
                .collect(),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulConst(Var, Matrix),
    Scale(Var, f64),
    Relu(Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    RowMix(Var, RowMix),
    RowCosine(Var, Var),
    WeightedGather {
        weights: Var,
        x: Var,
        index: Vec<Vec<usize>>,
    },
    Normalize {
        x: Var,
        inv_std: Vec<f64>,
        per_row: bool,
    },
    Sum(Var),
    /// Fused loss nodes keep their local gradients from the forward pass.
    Fused(Vec<(Var, Matrix)>),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

const COSINE_EPS: f64 = 1e-12;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that gradients are not propagated into.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is wanted (inputs under a gradient check).
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The leaf bound to a stored parameter; repeated calls share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    /// `x + 1ᵀ·row`: adds a 1×d row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        let mut v = self.value(x).clone();
        assert_eq!(v.cols(), r.cols(), "add_row width mismatch");
        let rv = r.as_slice().to_vec();
        for i in 0..v.rows() {
            for (o, b) in v.row_mut(i).iter_mut().zip(&rv) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(v, Op::AddRow(x, row), rg)
    }

    /// Multiplies every row of `x` elementwise by a 1×d row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "mul_row expects a row vector");
        let mut v = self.value(x).clone();
        assert_eq!(v.cols(), r.cols(), "mul_row width mismatch");
        let rv = r.as_slice().to_vec();
        for i in 0..v.rows() {
            for (o, b) in v.row_mut(i).iter_mut().zip(&rv) {
                *o *= b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(v, Op::MulRow(x, row), rg)
    }

    pub fn mul_const(&mut self, x: Var, c: Matrix) -> Var {
        let v = self.value(x).zip_map(&c, |a, b| a * b);
        let rg = self.rg(x);
        self.push(v, Op::MulConst(x, c), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|a| a * s);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(v, Op::Transpose(x), rg)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(x).clone().reshape(rows, cols);
        let rg = self.rg(x);
        self.push(v, Op::Reshape(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut v = src.clone();
        for i in 0..v.rows() {
            softmax_in_place(v.row_mut(i));
        }
        let rg = self.rg(x);
        self.push(v, Op::SoftmaxRows(x), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_cols(&mats);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_rows(&mats);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).slice_cols(start, end);
        let rg = self.rg(x);
        self.push(v, Op::SliceCols(x, start), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).slice_rows(start, end);
        let rg = self.rg(x);
        self.push(v, Op::SliceRows(x, start), rg)
    }

    pub fn row_mix(&mut self, x: Var, mix: RowMix) -> Var {
        let src = self.value(x);
        let mut v = Matrix::zeros(mix.terms.len(), src.cols());
        for (j, terms) in mix.terms.iter().enumerate() {
            for &(i, w) in terms {
                let (out, s) = (v.row_mut(j), src.row(i));
                for (o, a) in out.iter_mut().zip(s) {
                    *o += w * a;
                }
            }
        }
        let rg = self.rg(x);
        self.push(v, Op::RowMix(x, mix), rg)
    }

    /// Row-wise cosine similarity as an n×1 column; rows with a (near) zero
    /// norm give 0.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.shape(), mb.shape(), "row_cosine shape mismatch");
        let data = (0..ma.rows())
            .map(|i| cosine(ma.row(i), mb.row(i)))
            .collect();
        let v = Matrix::from_vec(ma.rows(), 1, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::RowCosine(a, b), rg)
    }

    /// `out[j] = Σ_m weights[j, m] · x[index[j][m]]`.
    pub fn weighted_gather(&mut self, weights: Var, x: Var, index: Vec<Vec<usize>>) -> Var {
        let (w, src) = (self.value(weights), self.value(x));
        assert_eq!(w.rows(), index.len(), "weighted_gather row mismatch");
        let mut v = Matrix::zeros(index.len(), src.cols());
        for (j, idx) in index.iter().enumerate() {
            assert_eq!(idx.len(), w.cols(), "weighted_gather width mismatch");
            for (m, &i) in idx.iter().enumerate() {
                let wm = w.get(j, m);
                let s = src.row(i);
                for (o, a) in v.row_mut(j).iter_mut().zip(s) {
                    *o += wm * a;
                }
            }
        }
        let rg = self.rg(weights) || self.rg(x);
        self.push(
            v,
            Op::WeightedGather {
                weights,
                x,
                index,
            },
            rg,
        )
    }

    /// Standardizes each column over the rows (batch statistics, biased variance).
    pub fn batch_normalize(&mut self, x: Var, eps: f64) -> Var {
        let src = self.value(x);
        let (n, d) = src.shape();
        let mean = src.col_sums().map(|s| s / n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for (c, (&a, &m)) in src.row(i).iter().zip(mean.as_slice()).enumerate() {
                var[c] += (a - m) * (a - m);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / n as f64 + eps).sqrt()).collect();
        let mut out = src.clone();
        for i in 0..n {
            for (c, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = (*o - mean.as_slice()[c]) * inv_std[c];
            }
        }
        let rg = self.rg(x);
        self.push(
            out,
            Op::Normalize {
                x,
                inv_std,
                per_row: false,
            },
            rg,
        )
    }

    /// Standardizes each row over its columns (layer normalization without affine).
    pub fn layer_normalize(&mut self, x: Var, eps: f64) -> Var {
        let src = self.value(x);
        let (n, d) = src.shape();
        let mut out = src.clone();
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for a in row.iter_mut() {
                *a = (*a - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(x);
        self.push(
            out,
            Op::Normalize {
                x,
                inv_std,
                per_row: true,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Matrix::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    /// Negative log-likelihood of `gold` under a linear-chain CRF whose
    /// scores are the given nodes.
    pub fn crf_nll(
        &mut self,
        emissions: Var,
        transitions: Var,
        start: Var,
        end: Var,
        mask: Option<&TransitionMask>,
        gold: &[usize],
    ) -> Var {
        let crf = Crf {
            transitions: self.value(transitions).clone(),
            start: self.value(start).as_slice().to_vec(),
            end: self.value(end).as_slice().to_vec(),
            mask: mask.cloned(),
        };
        let out = crf.nll_with_grads(self.value(emissions), gold);
        let rg = [emissions, transitions, start, end]
            .iter()
            .any(|&v| self.rg(v));
        let t = crf.num_tags();
        self.push(
            Matrix::scalar(out.nll),
            Op::Fused(vec![
                (emissions, out.d_emissions),
                (transitions, out.d_transitions),
                (start, Matrix::from_vec(1, t, out.d_start)),
                (end, Matrix::from_vec(1, t, out.d_end)),
            ]),
            rg,
        )
    }

    /// Mean softmax cross-entropy of each row of `logits` against `targets`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let l = self.value(logits);
        let n = l.rows();
        assert_eq!(n, targets.len(), "one target per row");
        let mut grad = l.clone();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = grad.row_mut(i);
            let lse = log_sum_exp(row);
            loss += lse - row[t];
            for a in row.iter_mut() {
                *a = (*a - lse).exp();
            }
            row[t] -= 1.0;
        }
        grad.scale_assign(1.0 / n as f64);
        let rg = self.rg(logits);
        self.push(
            Matrix::scalar(loss / n as f64),
            Op::Fused(vec![(logits, grad)]),
            rg,
        )
    }

    /// Mean binary cross-entropy with logits over an n×1 column.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.cols(), 1, "bce expects a column");
        assert_eq!(l.rows(), targets.len(), "one target per row");
        let n = targets.len() as f64;
        let mut loss = 0.0;
        let mut grad = Matrix::zeros(l.rows(), 1);
        for (i, &y) in targets.iter().enumerate() {
            let z = l.get(i, 0);
            // max(z,0) - z*y + log(1 + e^{-|z|})
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            grad.set(i, 0, (sigmoid(z) - y) / n);
        }
        let rg = self.rg(logits);
        self.push(
            Matrix::scalar(loss / n),
            Op::Fused(vec![(logits, grad)]),
            rg,
        )
    }

    /// Reverse pass from a 1×1 root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).shape(),
            (1, 1),
            "backward needs a scalar root"
        );
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(dout);
                continue;
            }
            self.propagate(&node.op, &node.value, &dout, &mut grads);
            grads[idx] = Some(dout);
        }
        Gradients { grads }
    }

    fn propagate(&self, op: &Op, out: &Matrix, dout: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, g: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, dout.matmul_t(vb));
                }
                if self.rg(*b) {
                    acc(*b, va.t_matmul(dout));
                }
            }
            Op::Add(a, b) => {
                acc(*a, dout.clone());
                acc(*b, dout.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, dout.clone());
                acc(*b, dout.map(|x| -x));
            }
            Op::AddRow(x, row) => {
                acc(*x, dout.clone());
                if self.rg(*row) {
                    acc(*row, dout.col_sums());
                }
            }
            Op::MulRow(x, row) => {
                let (vx, vr) = (self.value(*x), self.value(*row));
                if self.rg(*x) {
                    let mut gx = dout.clone();
                    for i in 0..gx.rows() {
                        for (g, r) in gx.row_mut(i).iter_mut().zip(vr.as_slice()) {
                            *g *= r;
                        }
                    }
                    acc(*x, gx);
                }
                if self.rg(*row) {
                    acc(*row, dout.zip_map(vx, |g, a| g * a).col_sums());
                }
            }
            Op::MulConst(x, c) => acc(*x, dout.zip_map(c, |g, a| g * a)),
            Op::Scale(x, s) => acc(*x, dout.map(|g| g * s)),
            Op::Relu(x) => {
                let vx = self.value(*x);
                acc(*x, dout.zip_map(vx, |g, a| if a > 0.0 { g } else { 0.0 }));
            }
            Op::Transpose(x) => acc(*x, dout.transpose()),
            Op::Reshape(x) => {
                let (r, c) = self.value(*x).shape();
                acc(*x, dout.clone().reshape(r, c));
            }
            Op::SoftmaxRows(x) => {
                let mut gx = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let (y, dy) = (out.row(i), dout.row(i));
                    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for (k, g) in gx.row_mut(i).iter_mut().enumerate() {
                        *g = y[k] * (dy[k] - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        acc(p, dout.slice_cols(start, start + w));
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.rg(p) {
                        acc(p, dout.slice_rows(start, start + h));
                    }
                    start += h;
                }
            }
            Op::SliceCols(x, start) => {
                let (r, c) = self.value(*x).shape();
                let mut gx = Matrix::zeros(r, c);
                for i in 0..r {
                    gx.row_mut(i)[*start..*start + dout.cols()].copy_from_slice(dout.row(i));
                }
                acc(*x, gx);
            }
            Op::SliceRows(x, start) => {
                let (r, c) = self.value(*x).shape();
                let mut gx = Matrix::zeros(r, c);
                for i in 0..dout.rows() {
                    gx.row_mut(start + i).copy_from_slice(dout.row(i));
                }
                acc(*x, gx);
            }
            Op::RowMix(x, mix) => {
                let (r, c) = self.value(*x).shape();
                let mut gx = Matrix::zeros(r, c);
                for (j, terms) in mix.terms.iter().enumerate() {
                    for &(i, w) in terms {
                        let d = dout.row(j);
                        for (g, a) in gx.row_mut(i).iter_mut().zip(d) {
                            *g += w * a;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::RowCosine(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut ga = Matrix::zeros(va.rows(), va.cols());
                let mut gb = Matrix::zeros(vb.rows(), vb.cols());
                for i in 0..va.rows() {
                    let (x, y) = (va.row(i), vb.row(i));
                    let nx = norm(x);
                    let ny = norm(y);
                    if nx < COSINE_EPS || ny < COSINE_EPS {
                        continue;
                    }
                    let c = out.get(i, 0);
                    let d = dout.get(i, 0);
                    for k in 0..x.len() {
                        ga.row_mut(i)[k] = d * (y[k] / (nx * ny) - c * x[k] / (nx * nx));
                        gb.row_mut(i)[k] = d * (x[k] / (nx * ny) - c * y[k] / (ny * ny));
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::WeightedGather {
                weights,
                x,
                index,
            } => {
                let (vw, vx) = (self.value(*weights), self.value(*x));
                let mut gw = Matrix::zeros(vw.rows(), vw.cols());
                let mut gx = Matrix::zeros(vx.rows(), vx.cols());
                for (j, idx) in index.iter().enumerate() {
                    let d = dout.row(j);
                    for (m, &i) in idx.iter().enumerate() {
                        let s = vx.row(i);
                        gw.set(j, m, d.iter().zip(s).map(|(a, b)| a * b).sum());
                        let w = vw.get(j, m);
                        for (g, a) in gx.row_mut(i).iter_mut().zip(d) {
                            *g += w * a;
                        }
                    }
                }
                acc(*weights, gw);
                acc(*x, gx);
            }
            Op::Normalize {
                x,
                inv_std,
                per_row,
            } => {
                // dx = inv/n · (n·dy − Σdy − y·Σ(dy⊙y)) along the reduced axis
                let (r, c) = out.shape();
                let mut gx = Matrix::zeros(r, c);
                if *per_row {
                    for i in 0..r {
                        let (y, dy) = (out.row(i), dout.row(i));
                        let s1: f64 = dy.iter().sum();
                        let s2: f64 = dy.iter().zip(y).map(|(a, b)| a * b).sum();
                        let n = c as f64;
                        for (k, g) in gx.row_mut(i).iter_mut().enumerate() {
                            *g = inv_std[i] / n * (n * dy[k] - s1 - y[k] * s2);
                        }
                    }
                } else {
                    let n = r as f64;
                    let s1 = dout.col_sums();
                    let s2 = dout.zip_map(out, |a, b| a * b).col_sums();
                    for i in 0..r {
                        for k in 0..c {
                            let v = inv_std[k] / n
                                * (n * dout.get(i, k) - s1.as_slice()[k] - out.get(i, k) * s2.as_slice()[k]);
                            gx.set(i, k, v);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                acc(*x, Matrix::filled(r, c, dout.item()));
            }
            Op::Fused(locals) => {
                let s = dout.item();
                for (v, g) in locals {
                    if self.rg(*v) {
                        acc(*v, g.map(|a| a * s));
                    }
                }
            }
        }
    }

    /// Gradients of every parameter bound into this graph.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Matrix)> {
        let mut out: Vec<(ParamId, Matrix)> = self
            .params
            .iter()
            .map(|(&id, &v)| {
                let g = grads
                    .wrt(v)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(self.value(v).rows(), self.value(v).cols()));
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for a in row.iter_mut() {
        *a = (*a - m).exp();
        s += *a;
    }
    for a in row.iter_mut() {
        *a /= s;
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Cosine similarity with `cos(0, ·) = 0`.
pub fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let (nx, ny) = (norm(x), norm(y));
    if nx < COSINE_EPS || ny < COSINE_EPS {
        return 0.0;
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / (nx * ny)).clamp(-1.0, 1.0)
}
