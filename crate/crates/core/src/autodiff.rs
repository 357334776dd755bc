//! Matrix-valued reverse-mode tape.
//!
//! Every value is a 2-D array; vectors are `1 x n` rows or `n x 1`
//! columns. Besides the usual dense algebra the tape carries the composite
//! ops the router needs (log-domain marginal projections, graph diffusion,
//! top-k rescaling, support-restricted softmax) with hand-written
//! pullbacks, so an unrolled Sinkhorn differentiates exactly as it ran.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::scalar::{log_sum_exp, Scalar};
use crate::tokenizer::RegionGraph;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weights multiplying `exp(score)` inside [`Tape::weighted_softmax`].
#[derive(Debug, Clone)]
pub enum SoftmaxWeights<T> {
    /// Differentiable weights (same shape as the scores).
    Var(Var),
    /// Constant weights; zeros exclude entries.
    Fixed(Array2<T>),
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf { param: Option<usize> },
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    MatMulAT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    MulConst(Var, Array2<T>),
    SegmentMean(Var, Arc<Vec<Vec<usize>>>),
    NeighborMean(Var, Arc<Vec<Vec<usize>>>),
    RowNormalize(Var),
    LogRowProject(Var),
    LogColProject(Var),
    Diffuse(Var, Arc<RegionGraph<T>>, T),
    TopK(Var, Array2<bool>, Array1<T>),
    WeightedSoftmax(Var, SoftmaxWeights<T>),
    Column(Var, usize),
    ConcatRows(Vec<Var>),
    CrossEntropy(Var, usize),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn row_lse<T: Scalar>(x: ArrayView2<T>) -> Array1<T> {
    x.rows()
        .into_iter()
        .map(|r| log_sum_exp(r.iter().copied()))
        .collect()
}

fn col_lse<T: Scalar>(x: ArrayView2<T>) -> Array1<T> {
    x.columns()
        .into_iter()
        .map(|c| log_sum_exp(c.iter().copied()))
        .collect()
}

fn tiny<T: Scalar>() -> T {
    T::min_positive_value().sqrt()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// Leaf whose gradient is reported under parameter slot `slot`.
    pub fn param(&mut self, slot: usize, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf { param: Some(slot) })
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulBT(a, b))
    }

    /// `aᵀ · b`
    pub fn matmul_at(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).t().dot(self.value(b));
        self.push(v, Op::MatMulAT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::AddRow(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let v = self.value(x).mapv(|e| scale * e + shift);
        self.push(v, Op::Affine(x, scale))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|e| e.max(T::zero()));
        self.push(v, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(T::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|e| T::one() / (T::one() + (-e).exp()));
        self.push(v, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(T::exp);
        self.push(v, Op::Exp(x))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, k: Array2<T>) -> Var {
        let v = self.value(x) * &k;
        self.push(v, Op::MulConst(x, k))
    }

    /// Row `m` of the output is the mean of input rows `groups[m]`.
    pub fn segment_mean(&mut self, x: Var, groups: Arc<Vec<Vec<usize>>>) -> Var {
        let v = crate::tokenizer::segment_mean(self.value(x).view(), &groups);
        self.push(v, Op::SegmentMean(x, groups))
    }

    /// Unweighted neighbour mean; an empty neighbourhood gives a zero row.
    pub fn neighbor_mean(&mut self, x: Var, neighbors: Arc<Vec<Vec<usize>>>) -> Var {
        let xv = self.value(x);
        let mut v = Array2::zeros(xv.raw_dim());
        for (mut row, list) in v.rows_mut().into_iter().zip(neighbors.iter()) {
            if list.is_empty() {
                continue;
            }
            for &n in list {
                row += &xv.row(n);
            }
            let k = T::from_usize_lossy(list.len());
            row.mapv_inplace(|e| e / k);
        }
        self.push(v, Op::NeighborMean(x, neighbors))
    }

    /// Unit-norm rows; (near-)zero rows map to zero with zero gradient.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let (v, _) = crate::otroute::normalize_rows(self.value(x).view());
        self.push(v, Op::RowNormalize(x))
    }

    /// `x − LSE_row(x) + log r`: the Sinkhorn row projection in log space.
    pub fn log_row_project(&mut self, x: Var, log_r: &Array1<T>) -> Var {
        let xv = self.value(x);
        let lse = row_lse(xv.view());
        let mut v = xv.clone();
        for (m, mut row) in v.rows_mut().into_iter().enumerate() {
            let shift = log_r[m] - lse[m];
            row.mapv_inplace(|e| e + shift);
        }
        self.push(v, Op::LogRowProject(x))
    }

    /// `x − LSE_col(x) + log q`: the Sinkhorn column projection in log space.
    pub fn log_col_project(&mut self, x: Var, log_q: &Array1<T>) -> Var {
        let xv = self.value(x);
        let lse = col_lse(xv.view());
        let mut v = xv.clone();
        for (e, mut col) in v.columns_mut().into_iter().enumerate() {
            let shift = log_q[e] - lse[e];
            col.mapv_inplace(|c| c + shift);
        }
        self.push(v, Op::LogColProject(x))
    }

    /// `(1−λ) x_m + λ Σ_n w_mn x_n` for rows with neighbours.
    pub fn diffuse(&mut self, x: Var, graph: Arc<RegionGraph<T>>, lambda: T) -> Var {
        let v = crate::otroute::diffuse_log_plan(self.value(x).view(), &graph, lambda);
        self.push(v, Op::Diffuse(x, graph, lambda))
    }

    /// Top-k rescale with a fixed selection mask: kept entries of row `m`
    /// are scaled to sum to `r[m]`, the rest are zero.
    pub fn topk_rescale(&mut self, x: Var, kept: Array2<bool>, r: Array1<T>) -> Var {
        let xv = self.value(x);
        let mut v = Array2::zeros(xv.raw_dim());
        for m in 0..xv.nrows() {
            let s: T = (0..xv.ncols())
                .filter(|&e| kept[[m, e]])
                .map(|e| xv[[m, e]])
                .sum();
            for e in (0..xv.ncols()).filter(|&e| kept[[m, e]]) {
                v[[m, e]] = r[m] * xv[[m, e]] / s;
            }
        }
        self.push(v, Op::TopK(x, kept, r))
    }

    /// Softmax over a column of scores with multiplicative weights:
    /// `β_m = w_m exp(s_m) / Σ_n w_n exp(s_n)`. Entries with zero weight get
    /// zero; if every weight is zero the output is all zeros.
    pub fn weighted_softmax(&mut self, scores: Var, weights: SoftmaxWeights<T>) -> Var {
        let s = self.value(scores);
        let w = match &weights {
            SoftmaxWeights::Var(v) => self.value(*v).clone(),
            SoftmaxWeights::Fixed(a) => a.clone(),
        };
        let (beta, _, _) = weighted_softmax_parts(s.view(), w.view());
        self.push(beta, Op::WeightedSoftmax(scores, weights))
    }

    /// Column `j` as an `n x 1` node.
    pub fn column(&mut self, x: Var, j: usize) -> Var {
        let v = self.value(x).column(j).to_owned().insert_axis(Axis(1));
        self.push(v, Op::Column(x, j))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: width mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Softmax cross-entropy of a `1 x C` logit row against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let z = self.value(logits);
        let lse = log_sum_exp(z.iter().copied());
        let v = Array2::from_elem((1, 1), lse - z[[0, label]]);
        self.push(v, Op::CrossEntropy(logits, label))
    }

    /// On/off pattern of every non-smooth point on the tape: ReLU input
    /// signs, top-k masks and zero-norm guards. Two evaluations with equal
    /// signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => sig.extend(self.value(*x).iter().map(|&e| e > T::zero())),
                Op::TopK(_, kept, _) => sig.extend(kept.iter().copied()),
                Op::RowNormalize(x) => sig.extend(
                    self.value(*x)
                        .rows()
                        .into_iter()
                        .map(|r| r.dot(&r).sqrt() > tiny()),
                ),
                _ => {}
            }
        }
        sig
    }

    /// Reverse sweep from `root` seeded with `seed` (a `1 x 1` root is the
    /// usual case). Returns the gradient of every parameter slot that was
    /// reached; slots never touched map to `None`.
    pub fn backward(&self, root: Var, seed: T, n_slots: usize) -> Vec<Option<Array2<T>>> {
        let mut grads: Vec<Option<Array2<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array2::from_elem(self.value(root).raw_dim(), seed));
        let mut out = vec![None; n_slots];
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.pullback(node, idx, g, &mut grads, &mut out);
        }
        out
    }

    fn pullback(
        &self,
        node: &Node<T>,
        _idx: usize,
        g: Array2<T>,
        grads: &mut [Option<Array2<T>>],
        out: &mut [Option<Array2<T>>],
    ) {
        let acc = |grads: &mut [Option<Array2<T>>], v: Var, d: Array2<T>| match &mut grads[v.0] {
            Some(existing) => *existing += &d,
            slot @ None => *slot = Some(d),
        };
        match &node.op {
            Op::Leaf { param } => {
                if let Some(slot) = param {
                    match &mut out[*slot] {
                        Some(existing) => *existing += &g,
                        s @ None => *s = Some(g),
                    }
                }
            }
            Op::MatMul(a, b) => {
                acc(grads, *a, g.dot(&self.value(*b).t()));
                acc(grads, *b, self.value(*a).t().dot(&g));
            }
            Op::MatMulBT(a, b) => {
                acc(grads, *a, g.dot(self.value(*b)));
                acc(grads, *b, g.t().dot(self.value(*a)));
            }
            Op::MatMulAT(a, b) => {
                acc(grads, *a, self.value(*b).dot(&g.t()));
                acc(grads, *b, self.value(*a).dot(&g));
            }
            Op::Add(a, b) => {
                acc(grads, *b, g.clone());
                acc(grads, *a, g);
            }
            Op::AddRow(a, b) => {
                acc(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                acc(grads, *a, &g * self.value(*b));
                acc(grads, *b, &g * self.value(*a));
            }
            Op::Affine(x, scale) => acc(grads, *x, g.mapv(|e| e * *scale)),
            Op::Relu(x) => {
                let mut d = g;
                d.zip_mut_with(self.value(*x), |e, &xi| {
                    if xi <= T::zero() {
                        *e = T::zero();
                    }
                });
                acc(grads, *x, d);
            }
            Op::Tanh(x) => {
                let mut d = g;
                d.zip_mut_with(&node.value, |e, &y| *e *= T::one() - y * y);
                acc(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let mut d = g;
                d.zip_mut_with(&node.value, |e, &y| *e = *e * y * (T::one() - y));
                acc(grads, *x, d);
            }
            Op::Exp(x) => acc(grads, *x, g * &node.value),
            Op::MulConst(x, k) => acc(grads, *x, g * k),
            Op::SegmentMean(x, groups) => {
                let mut d = Array2::zeros(self.value(*x).raw_dim());
                for (m, group) in groups.iter().enumerate() {
                    let inv = T::one() / T::from_usize_lossy(group.len().max(1));
                    for &i in group {
                        d.row_mut(i).scaled_add(inv, &g.row(m));
                    }
                }
                acc(grads, *x, d);
            }
            Op::NeighborMean(x, neighbors) => {
                let mut d = Array2::zeros(self.value(*x).raw_dim());
                for (m, list) in neighbors.iter().enumerate() {
                    if list.is_empty() {
                        continue;
                    }
                    let inv = T::one() / T::from_usize_lossy(list.len());
                    for &n in list {
                        d.row_mut(n).scaled_add(inv, &g.row(m));
                    }
                }
                acc(grads, *x, d);
            }
            Op::RowNormalize(x) => {
                let xv = self.value(*x);
                let mut d = Array2::zeros(xv.raw_dim());
                for m in 0..xv.nrows() {
                    let norm = xv.row(m).dot(&xv.row(m)).sqrt();
                    if norm <= tiny() {
                        continue;
                    }
                    let y = node.value.row(m);
                    let proj = y.dot(&g.row(m));
                    for j in 0..xv.ncols() {
                        d[[m, j]] = (g[[m, j]] - y[j] * proj) / norm;
                    }
                }
                acc(grads, *x, d);
            }
            Op::LogRowProject(x) => {
                let xv = self.value(*x);
                let lse = row_lse(xv.view());
                let mut d = g.clone();
                for m in 0..xv.nrows() {
                    let total = g.row(m).sum();
                    for e in 0..xv.ncols() {
                        d[[m, e]] -= (xv[[m, e]] - lse[m]).exp() * total;
                    }
                }
                acc(grads, *x, d);
            }
            Op::LogColProject(x) => {
                let xv = self.value(*x);
                let lse = col_lse(xv.view());
                let mut d = g.clone();
                for e in 0..xv.ncols() {
                    let total = g.column(e).sum();
                    for m in 0..xv.nrows() {
                        d[[m, e]] -= (xv[[m, e]] - lse[e]).exp() * total;
                    }
                }
                acc(grads, *x, d);
            }
            Op::Diffuse(x, graph, lambda) => {
                let keep = T::one() - *lambda;
                let mut d = g.clone();
                for (m, list) in graph.neighbors.iter().enumerate() {
                    if !list.is_empty() {
                        d.row_mut(m).mapv_inplace(|e| e * keep);
                    }
                }
                for (m, (list, ws)) in graph.neighbors.iter().zip(&graph.weights).enumerate() {
                    for (&n, &w) in list.iter().zip(ws) {
                        d.row_mut(n).scaled_add(*lambda * w, &g.row(m));
                    }
                }
                acc(grads, *x, d);
            }
            Op::TopK(x, kept, r) => {
                let xv = self.value(*x);
                let mut d = Array2::zeros(xv.raw_dim());
                for m in 0..xv.nrows() {
                    let cols: Vec<usize> = (0..xv.ncols()).filter(|&e| kept[[m, e]]).collect();
                    let s: T = cols.iter().map(|&e| xv[[m, e]]).sum();
                    let dot: T = cols.iter().map(|&e| g[[m, e]] * xv[[m, e]]).sum::<T>() / s;
                    for &e in &cols {
                        d[[m, e]] = r[m] / s * (g[[m, e]] - dot);
                    }
                }
                acc(grads, *x, d);
            }
            Op::WeightedSoftmax(scores, weights) => {
                let s = self.value(*scores);
                let w = match weights {
                    SoftmaxWeights::Var(v) => self.value(*v).clone(),
                    SoftmaxWeights::Fixed(a) => a.clone(),
                };
                let (beta, unit, z) = weighted_softmax_parts(s.view(), w.view());
                if z <= T::zero() {
                    return;
                }
                let c: T = beta.iter().zip(g.iter()).map(|(&b, &gg)| b * gg).sum();
                let centered = g.mapv(|gg| gg - c);
                acc(grads, *scores, &beta * &centered);
                if let SoftmaxWeights::Var(v) = weights {
                    acc(grads, *v, unit.mapv(|u| u / z) * &centered);
                }
            }
            Op::Column(x, j) => {
                let mut d = Array2::zeros(self.value(*x).raw_dim());
                d.column_mut(*j).assign(&g.column(0));
                acc(grads, *x, d);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).nrows();
                    acc(
                        grads,
                        p,
                        g.slice(ndarray::s![start..start + rows, ..]).to_owned(),
                    );
                    start += rows;
                }
            }
            Op::CrossEntropy(logits, label) => {
                let z = self.value(*logits);
                let lse = log_sum_exp(z.iter().copied());
                let scale = g[[0, 0]];
                let mut d = z.mapv(|e| (e - lse).exp() * scale);
                d[[0, *label]] -= scale;
                acc(grads, *logits, d);
            }
        }
    }
}

/// `(β, exp(s − max), Z)` with `β = w ⊙ exp(s − max) / Z`.
fn weighted_softmax_parts<T: Scalar>(
    s: ArrayView2<T>,
    w: ArrayView2<T>,
) -> (Array2<T>, Array2<T>, T) {
    let max = s
        .iter()
        .zip(w.iter())
        .filter(|(_, &wi)| wi > T::zero())
        .fold(T::neg_infinity(), |acc, (&si, _)| acc.max(si));
    if max == T::neg_infinity() {
        return (
            Array2::zeros(s.raw_dim()),
            Array2::zeros(s.raw_dim()),
            T::zero(),
        );
    }
    let unit = s.mapv(|si| (si - max).exp());
    let weighted = &unit * &w;
    let z = weighted.sum();
    (weighted.mapv(|u| u / z), unit, z)
}
