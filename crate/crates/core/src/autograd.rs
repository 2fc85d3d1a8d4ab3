//! Minimal reverse-mode differentiation over 2-D `f64` matrices.
//!
//! A [`Tape`] records operations against a borrowed [`ParamStore`]; calling
//! [`Tape::backward`] returns a [`Grads`] aligned with the store. Vectors are
//! `1 x n` matrices and scalars are `1 x 1`.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    /// Stand-in for a tensor that failed to resolve; never dereferenced.
    pub(crate) fn dangling() -> Self {
        ParamId(usize::MAX)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor. Panics on duplicate names, which is a construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Gradients aligned with a [`ParamStore`]; `None` means untouched.
#[derive(Debug, Clone)]
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn accumulate(&mut self, id: ParamId, g: &Mat) {
        match &mut self.grads[id.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &Grads) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * c);
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulBt(Var, Var),
    Linear(Var, Var, Option<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    LayerNormRows(Var, Vec<f64>),
    L2NormalizeRows(Var, Vec<f64>),
    Sum(Var),
    Mean(Var, f64),
    MeanRows(Var),
    Diag(Var),
    BceWithLogits(Var, Vec<f64>, Vec<f64>, f64),
    MaskedSquaredError(Var, Mat, Mat, f64),
}

#[derive(Debug)]
enum Stored {
    Owned(Mat),
    Param(ParamId),
}

#[derive(Debug)]
struct Node {
    value: Stored,
    op: Op,
}

/// Records a computation for one backward pass.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn softmax_rows(x: ArrayView2<f64>) -> Mat {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node {
            value: Stored::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        match &self.nodes[v.0].value {
            Stored::Owned(m) => m.view(),
            Stored::Param(id) => self.params.get(*id).view(),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let d = self.value(v).dim();
        (d.0, d.1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; receives no gradient outside the tape.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Stored::Param(id),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulBt(a, b))
    }

    /// `x W + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let mut v = self.value(x).dot(&self.value(w));
        if let Some(b) = b {
            v += &self.value(b);
        }
        self.push(v, Op::Linear(x, w, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.value(a) + &self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.value(a) - &self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.value(a) * &self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = &self.value(a) + &self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = &self.value(a) * &self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    /// Multiplies by a `1 x 1` variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let c = self.scalar(s);
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::ScaleBy(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).to_owned();
        for mut row in v.rows_mut() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let l = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| (x - m) - l);
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p)).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p)).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Row lookup: `out[i] = table[ids[i]]`. Ids must be in range.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut v = Mat::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).assign(&t.row(id));
        }
        self.push(v, Op::GatherRows(table, ids.to_vec()))
    }

    /// Per-row standardisation without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut v = x.to_owned();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in v.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * is);
            inv_std.push(is);
        }
        self.push(v, Op::LayerNormRows(a, inv_std))
    }

    /// Unit-length rows. Callers must rule out zero rows first.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).to_owned();
        let mut norms = Vec::with_capacity(v.nrows());
        for mut row in v.rows_mut() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.mapv_inplace(|x| x / n);
            norms.push(n);
        }
        self.push(v, Op::L2NormalizeRows(a, norms))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Mean of all entries, shifted by the first entry so that a constant
    /// input returns that constant exactly.
    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.len() as f64;
        let x0 = x.iter().next().copied().unwrap_or(0.0);
        let m = x0 + x.iter().map(|v| v - x0).sum::<f64>() / n;
        self.push(Mat::from_elem((1, 1), m), Op::Mean(a, n))
    }

    /// Column means as a `1 x n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = x
            .mean_axis(Axis(0))
            .expect("mean_rows of empty matrix")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    /// Diagonal of a square matrix as an `n x 1` column.
    pub fn diag(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.nrows().min(x.ncols());
        let v = Mat::from_shape_fn((n, 1), |(i, _)| x[[i, i]]);
        self.push(v, Op::Diag(a))
    }

    /// Weighted mean binary cross-entropy of an `n x 1` logit column.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.len(), targets.len());
        assert_eq!(z.len(), weights.len());
        let total_w: f64 = weights.iter().sum();
        let mut loss = 0.0;
        for ((zi, yi), wi) in z.iter().zip(targets).zip(weights) {
            loss += wi * (softplus(*zi) - yi * zi);
        }
        let v = Mat::from_elem((1, 1), loss / total_w);
        self.push(
            v,
            Op::BceWithLogits(logits, targets.to_vec(), weights.to_vec(), total_w),
        )
    }

    /// `sum(mask * (pred - target)^2) / sum(mask)`.
    pub fn masked_squared_error(&mut self, pred: Var, target: Mat, mask: Mat) -> Var {
        let p = self.value(pred);
        let total: f64 = mask.sum();
        let mut loss = 0.0;
        Zip::from(&p).and(&target).and(&mask).for_each(|p, t, m| {
            loss += m * (p - t).powi(2);
        });
        let v = Mat::from_elem((1, 1), loss / total);
        self.push(v, Op::MaskedSquaredError(pred, target, mask, total))
    }

    /// Gradients of a `1 x 1` output with respect to every parameter used.
    pub fn backward(&self, output: Var) -> Grads {
        self.backward_with(output, Mat::ones((1, 1)))
    }

    /// Backpropagates an explicit output gradient.
    pub fn backward_with(&self, output: Var, seed: Mat) -> Grads {
        let mut grads = Grads::zeros_like(self.params);
        let mut g: Vec<Option<Mat>> = Vec::with_capacity(output.0 + 1);
        g.resize_with(output.0 + 1, || None);
        g[output.0] = Some(seed);

        fn acc(g: &mut [Option<Mat>], v: Var, d: Mat) {
            match &mut g[v.0] {
                Some(x) => *x += &d,
                slot @ None => *slot = Some(d),
            }
        }
        fn acc_view(g: &mut [Option<Mat>], v: Var, d: ArrayView2<f64>) {
            match &mut g[v.0] {
                Some(x) => *x += &d,
                slot @ None => *slot = Some(d.to_owned()),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(go) = g[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let out = match &node.value {
                Stored::Owned(m) => m.view(),
                Stored::Param(id) => self.params.get(*id).view(),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => grads.accumulate(*id, &go),
                Op::MatMul(a, b) => {
                    let ga = go.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&go);
                    acc(&mut g, *a, ga);
                    acc(&mut g, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    let ga = go.dot(&self.value(*b));
                    let gb = go.t().dot(&self.value(*a));
                    acc(&mut g, *a, ga);
                    acc(&mut g, *b, gb);
                }
                Op::Linear(x, w, b) => {
                    let gx = go.dot(&self.value(*w).t());
                    let gw = self.value(*x).t().dot(&go);
                    if let Some(b) = b {
                        let gb = go.sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut g, *b, gb);
                    }
                    acc(&mut g, *x, gx);
                    acc(&mut g, *w, gw);
                }
                Op::Add(a, b) => {
                    acc_view(&mut g, *b, go.view());
                    acc(&mut g, *a, go);
                }
                Op::Sub(a, b) => {
                    acc(&mut g, *b, go.mapv(|x| -x));
                    acc(&mut g, *a, go);
                }
                Op::Mul(a, b) => {
                    let ga = &go * &self.value(*b);
                    let gb = &go * &self.value(*a);
                    acc(&mut g, *a, ga);
                    acc(&mut g, *b, gb);
                }
                Op::AddRow(a, r) => {
                    let gr = go.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut g, *r, gr);
                    acc(&mut g, *a, go);
                }
                Op::MulRow(a, r) => {
                    let gr = (&go * &self.value(*a))
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    let ga = &go * &self.value(*r);
                    acc(&mut g, *r, gr);
                    acc(&mut g, *a, ga);
                }
                Op::Scale(a, c) => acc(&mut g, *a, go.mapv(|x| x * c)),
                Op::ScaleBy(a, s) => {
                    let c = self.scalar(*s);
                    let gs = (&go * &self.value(*a)).sum();
                    acc(&mut g, *s, Mat::from_elem((1, 1), gs));
                    acc(&mut g, *a, go.mapv(|x| x * c));
                }
                Op::Tanh(a) => {
                    let mut d = go;
                    Zip::from(&mut d).and(&out).for_each(|d, y| *d *= 1.0 - y * y);
                    acc(&mut g, *a, d);
                }
                Op::Relu(a) => {
                    let mut d = go;
                    Zip::from(&mut d).and(&out).for_each(|d, y| {
                        if *y <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(&mut g, *a, d);
                }
                Op::Exp(a) => {
                    let d = &go * &out;
                    acc(&mut g, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let mut d = &go * &out;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(out.rows()) {
                        let s: f64 = drow.sum();
                        Zip::from(&mut drow).and(&yrow).for_each(|d, y| *d -= y * s);
                    }
                    acc(&mut g, *a, d);
                }
                Op::LogSoftmaxRows(a) => {
                    let mut d = go;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(out.rows()) {
                        let s: f64 = drow.sum();
                        Zip::from(&mut drow)
                            .and(&yrow)
                            .for_each(|d, y| *d -= y.exp() * s);
                    }
                    acc(&mut g, *a, d);
                }
                Op::Transpose(a) => acc(&mut g, *a, go.t().to_owned()),
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut d = Mat::zeros((r, c));
                    d.slice_mut(s![.., *start..*start + go.ncols()]).assign(&go);
                    acc(&mut g, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        acc_view(&mut g, *p, go.slice(s![.., off..off + w]));
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        acc_view(&mut g, *p, go.slice(s![off..off + h, ..]));
                        off += h;
                    }
                }
                Op::GatherRows(table, ids) => {
                    let (r, c) = self.shape(*table);
                    let mut d = Mat::zeros((r, c));
                    for (i, &id) in ids.iter().enumerate() {
                        let mut row = d.row_mut(id);
                        row += &go.row(i);
                    }
                    acc(&mut g, *table, d);
                }
                Op::LayerNormRows(a, inv_std) => {
                    let n = out.ncols() as f64;
                    let mut d = go;
                    for ((mut drow, yrow), is) in
                        d.rows_mut().into_iter().zip(out.rows()).zip(inv_std)
                    {
                        let mean_g = drow.sum() / n;
                        let mean_gy = drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        Zip::from(&mut drow)
                            .and(&yrow)
                            .for_each(|d, y| *d = is * (*d - mean_g - y * mean_gy));
                    }
                    acc(&mut g, *a, d);
                }
                Op::L2NormalizeRows(a, norms) => {
                    let mut d = go;
                    for ((mut drow, yrow), n) in d.rows_mut().into_iter().zip(out.rows()).zip(norms)
                    {
                        let dot: f64 = drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                        Zip::from(&mut drow)
                            .and(&yrow)
                            .for_each(|d, y| *d = (*d - y * dot) / n);
                    }
                    acc(&mut g, *a, d);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    acc(&mut g, *a, Mat::from_elem((r, c), go[[0, 0]]));
                }
                Op::Mean(a, n) => {
                    let (r, c) = self.shape(*a);
                    acc(&mut g, *a, Mat::from_elem((r, c), go[[0, 0]] / n));
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.shape(*a);
                    let row = go.mapv(|x| x / r as f64);
                    let d = Mat::from_shape_fn((r, c), |(_, j)| row[[0, j]]);
                    acc(&mut g, *a, d);
                }
                Op::Diag(a) => {
                    let (r, c) = self.shape(*a);
                    let mut d = Mat::zeros((r, c));
                    for i in 0..go.nrows() {
                        d[[i, i]] = go[[i, 0]];
                    }
                    acc(&mut g, *a, d);
                }
                Op::BceWithLogits(z, targets, weights, total_w) => {
                    let gz = go[[0, 0]];
                    let zv = self.value(*z);
                    let mut d = Mat::zeros(zv.dim());
                    for (k, (dz, zi)) in d.iter_mut().zip(zv.iter()).enumerate() {
                        *dz = gz * weights[k] * (sigmoid(*zi) - targets[k]) / total_w;
                    }
                    acc(&mut g, *z, d);
                }
                Op::MaskedSquaredError(p, target, mask, total) => {
                    let gl = go[[0, 0]];
                    let pv = self.value(*p);
                    let mut d = Mat::zeros(pv.dim());
                    Zip::from(&mut d)
                        .and(&pv)
                        .and(target)
                        .and(mask)
                        .for_each(|d, p, t, m| *d = gl * 2.0 * m * (p - t) / total);
                    acc(&mut g, *p, d);
                }
            }
        }
        grads
    }
}
