//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every model in the crate (encoder, extractor, loss predictor) is written
//! against [`Graph`]. A graph is built fresh for each forward pass, values are
//! computed eagerly as nodes are pushed, and [`Graph::backward`] walks the tape
//! in reverse to produce parameter gradients.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};

use crate::params::{ParamId, ParamStore};

const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    ParamRows(ParamId, Vec<usize>, usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm(Var, Vec<f64>),
    HCat(Vec<Var>),
    VCat(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    CrossEntropy(Var, Vec<usize>, Array2<f64>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients keyed by parameter. Absent entries are zero.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Array2<f64>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    fn entry(&mut self, id: ParamId, shape: (usize, usize)) -> &mut Array2<f64> {
        self.grads
            .entry(id)
            .or_insert_with(|| Array2::zeros(shape))
    }

    pub(crate) fn insert(&mut self, id: ParamId, g: Array2<f64>) {
        match self.grads.get_mut(&id) {
            Some(existing) => *existing += &g,
            None => {
                self.grads.insert(id, g);
            }
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in other.iter() {
            *self.entry(id, g.dim()) += g;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    /// Global L2 norm over all entries.
    pub fn norm(&self) -> f64 {
        self.grads
            .values()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// Computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl Graph {
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Row lookup into a parameter table (embeddings).
    pub fn param_rows(&mut self, store: &ParamStore, id: ParamId, rows: &[usize]) -> Var {
        let table = store.value(id);
        let mut out = Array2::zeros((rows.len(), table.ncols()));
        for (r, &src) in rows.iter().enumerate() {
            out.row_mut(r).assign(&table.row(src));
        }
        let table_rows = table.nrows();
        self.push(out, Op::ParamRows(id, rows.to_vec(), table_rows))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// `a (n×d) + row (1×d)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// `a (n×d) ⊙ row (1×d)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    /// `a (n×d) ⊙ col (n×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let v = self.value(a) * self.value(col);
        self.push(v, Op::MulCol(a, col))
    }

    /// `scale · a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).mapv(|x| scale * x + shift);
        self.push(v, Op::Affine(a, scale))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm(a, inv_std))
    }

    pub fn hcat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("hcat: row counts differ");
        self.push(v, Op::HCat(parts.to_vec()))
    }

    pub fn vcat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("vcat: column counts differ");
        self.push(v, Op::VCat(parts.to_vec()))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    /// Output row `r` is input row `rows[r]`; rows may repeat.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let x = self.value(a);
        let mut out = Array2::zeros((rows.len(), x.ncols()));
        for (r, &src) in rows.iter().enumerate() {
            out.row_mut(r).assign(&x.row(src));
        }
        self.push(out, Op::GatherRows(a, rows.to_vec()))
    }

    /// Per-row natural-log cross-entropy of `logits` against class indices.
    /// Output is `n × 1`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let probs = softmax_rows(self.value(logits));
        assert_eq!(probs.nrows(), targets.len(), "cross_entropy: target count");
        let x = self.value(logits);
        let mut out = Array2::zeros((targets.len(), 1));
        for (r, &t) in targets.iter().enumerate() {
            let row = x.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out[[r, 0]] = lse - row[t];
        }
        self.push(out, Op::CrossEntropy(logits, targets.to_vec(), probs))
    }

    /// Sum of all entries, as `1 × 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.affine(s, 1.0 / n, 0.0)
    }

    /// Reverse pass from a scalar node. Gradients on parameter leaves are
    /// returned; gradients on inputs are discarded.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar");
        self.backward_from(loss, Array2::from_elem((1, 1), 1.0))
    }

    /// Reverse pass seeded with an arbitrary upstream gradient.
    pub fn backward_from(&self, out: Var, seed: Array2<f64>) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed);
        let mut params = Gradients::new();

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    *params.entry(*id, dy.dim()) += &dy;
                }
                Op::ParamRows(id, rows, table_rows) => {
                    let g = params.entry(*id, (*table_rows, dy.ncols()));
                    for (r, &dst) in rows.iter().enumerate() {
                        let mut row = g.row_mut(dst);
                        row += &dy.row(r);
                    }
                }
                Op::MatMul(a, b) => {
                    let da = dy.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&dy);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = dy.dot(self.value(*b));
                    let db = dy.t().dot(self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, dy.clone());
                    acc(&mut grads, *a, dy);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&dy);
                    acc(&mut grads, *a, dy);
                }
                Op::Mul(a, b) => {
                    let da = &dy * self.value(*b);
                    let db = &dy * self.value(*a);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddRow(a, row) => {
                    let dr = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, dr);
                    acc(&mut grads, *a, dy);
                }
                Op::MulRow(a, row) => {
                    let da = &dy * self.value(*row);
                    let dr = (&dy * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *row, dr);
                }
                Op::MulCol(a, col) => {
                    let da = &dy * self.value(*col);
                    let dc = (&dy * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *col, dc);
                }
                Op::Affine(a, scale) => {
                    acc(&mut grads, *a, dy.mapv(|g| g * scale));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let mut da = dy;
                    da.zip_mut_with(y, |g, &y| *g *= 1.0 - y * y);
                    acc(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let mut da = dy;
                    da.zip_mut_with(y, |g, &y| *g *= y * (1.0 - y));
                    acc(&mut grads, *a, da);
                }
                Op::Softplus(a) => {
                    let x = self.value(*a);
                    let mut da = dy;
                    da.zip_mut_with(x, |g, &x| *g *= sigmoid(x));
                    acc(&mut grads, *a, da);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut da = dy;
                    da.zip_mut_with(x, |g, &x| {
                        if x <= 0.0 {
                            *g = 0.0
                        }
                    });
                    acc(&mut grads, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = &dy * y;
                    for (mut row, yrow) in da.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        row.zip_mut_with(&yrow, |d, &yv| *d -= dot * yv);
                    }
                    acc(&mut grads, *a, da);
                }
                Op::LayerNorm(a, inv_std) => {
                    let xhat = &node.value;
                    let d = xhat.ncols() as f64;
                    let mut da = Array2::zeros(dy.dim());
                    for r in 0..dy.nrows() {
                        let g = dy.row(r);
                        let xh = xhat.row(r);
                        let mean_g = g.sum() / d;
                        let mean_gx = g.dot(&xh) / d;
                        let inv = inv_std[r];
                        for c in 0..dy.ncols() {
                            da[[r, c]] = inv * (g[c] - mean_g - xh[c] * mean_gx);
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::HCat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut grads, *p, dy.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::VCat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        acc(&mut grads, *p, dy.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut da = Array2::zeros(self.shape(*a));
                    da.slice_mut(s![.., *start..*end]).assign(&dy);
                    acc(&mut grads, *a, da);
                }
                Op::GatherRows(a, rows) => {
                    let mut da = Array2::zeros(self.shape(*a));
                    for (r, &src) in rows.iter().enumerate() {
                        let mut row = da.row_mut(src);
                        row += &dy.row(r);
                    }
                    acc(&mut grads, *a, da);
                }
                Op::CrossEntropy(logits, targets, probs) => {
                    let mut da = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        da[[r, t]] -= 1.0;
                        let g = dy[[r, 0]];
                        da.row_mut(r).mapv_inplace(|v| v * g);
                    }
                    acc(&mut grads, *logits, da);
                }
                Op::Sum(a) => {
                    let g = dy[[0, 0]];
                    acc(&mut grads, *a, Array2::from_elem(self.shape(*a), g));
                }
            }
        }
        params
    }
}
