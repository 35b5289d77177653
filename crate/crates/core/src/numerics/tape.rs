//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends one node to the tape in evaluation order, so the
//! node list is already a topological order. [`Tape::backward`] walks it once
//! in reverse and accumulates gradients for every parameter that the scalar
//! output depends on.

use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use super::TensorError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Normalization statistics used by [`Tape::batch_norm`].
#[derive(Clone, Debug)]
pub enum NormStats {
    /// Standardize with the statistics of the current batch.
    Batch,
    /// Standardize with frozen per-column mean and variance.
    Fixed { mean: Vec<f64>, var: Vec<f64> },
}

/// Per-column mean and (biased) variance observed by a batch-mode norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    OuterAdd(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    MaskedRowSoftmax(Var),
    MeanRows(Var),
    SumAll(Var),
    RowL2Normalize(Var, Vec<f64>),
    GatherRows(Var, Arc<[usize]>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch: bool,
    },
    Bce {
        p: Var,
        targets: Arc<Tensor>,
        weights: Arc<Tensor>,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

/// Probabilities fed to [`Tape::bce`] are clamped into this interval.
pub const BCE_CLAMP: f64 = 1e-12;

/// Floor applied to row norms in [`Tape::row_l2_normalize`].
pub const NORM_FLOOR: f64 = 1e-12;

/// Records one forward evaluation. Parameters are read from a borrowed
/// [`ParamStore`] and never copied onto the tape.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every parameter in the store.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }

    pub fn into_vec(self) -> Vec<Tensor> {
        self.grads
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape()))
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id),
            _ => node
                .value
                .as_ref()
                .expect("non-parameter node carries a value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var, TensorError> {
        self.push(value, Op::Constant, "constant")
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = super::tensor::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = super::tensor::matmul_t(self.value(a), self.value(b))?;
        self.push(out, Op::MatMulT(a, b), "matmul_t")
    }

    fn zip_with(
        &self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// Adds a `1 × n` row to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(shape_err("add_row", ta, tb));
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, bias), "add_row")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, k), "scale")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Shape("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), t));
            }
            cols += t.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), "transpose")
    }

    /// `out[i][j] = col[i] + row[j]` for an `m × 1` column and `1 × n` row.
    pub fn outer_add(&mut self, col: Var, row: Var) -> Result<Var, TensorError> {
        let (tc, tr) = (self.value(col), self.value(row));
        if tc.cols() != 1 || tr.rows() != 1 {
            return Err(shape_err("outer_add", tc, tr));
        }
        let mut out = Tensor::zeros(tc.rows(), tr.cols());
        for i in 0..tc.rows() {
            let ci = tc.data()[i];
            for (o, r) in out.row_mut(i).iter_mut().zip(tr.data()) {
                *o = ci + r;
            }
        }
        self.push(out, Op::OuterAdd(col, row), "outer_add")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(out, Op::LeakyRelu(a, slope), "leaky_relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    /// Row-wise softmax restricted to entries where `mask` is true.
    ///
    /// Masked entries come out exactly zero. A row without any unmasked entry
    /// is an error.
    pub fn masked_row_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if mask.len() != ta.len() {
            return Err(TensorError::Shape(format!(
                "mask of {} entries for {:?}",
                mask.len(),
                ta.shape()
            )));
        }
        let mut out = Tensor::zeros(ta.rows(), ta.cols());
        let cols = ta.cols();
        for r in 0..ta.rows() {
            let m = &mask[r * cols..(r + 1) * cols];
            let x = ta.row(r);
            let max = x
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::EmptySoftmaxRow(r));
            }
            let o = out.row_mut(r);
            let mut total = 0.0;
            for c in 0..cols {
                if m[c] {
                    o[c] = (x[c] - max).exp();
                    total += o[c];
                }
            }
            for v in o.iter_mut() {
                *v /= total;
            }
        }
        self.push(out, Op::MaskedRowSoftmax(a), "masked_row_softmax")
    }

    /// Column means: `m × n → 1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if ta.rows() == 0 {
            return Err(TensorError::Shape("mean over zero rows".into()));
        }
        let mut out = Tensor::zeros(1, ta.cols());
        for r in 0..ta.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(ta.row(r)) {
                *o += v;
            }
        }
        out.scale_in_place(1.0 / ta.rows() as f64);
        self.push(out, Op::MeanRows(a), "mean_rows")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a), "sum_all")
    }

    /// Scales each row to unit L2 norm. Norms below [`NORM_FLOOR`] are floored,
    /// so an all-zero row stays zero.
    pub fn row_l2_normalize(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let mut out = ta.clone();
        let mut norms = Vec::with_capacity(ta.rows());
        for r in 0..ta.rows() {
            let n = ta.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = n.max(NORM_FLOOR);
            for v in out.row_mut(r) {
                *v /= d;
            }
            norms.push(n);
        }
        self.push(out, Op::RowL2Normalize(a, norms), "row_l2_normalize")
    }

    /// `out[r] = a[index[r]]`
    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let mut out = Tensor::zeros(index.len(), ta.cols());
        for (r, &src) in index.iter().enumerate() {
            if src >= ta.rows() {
                return Err(TensorError::Shape(format!(
                    "gather row {src} from {} rows",
                    ta.rows()
                )));
            }
            out.row_mut(r).copy_from_slice(ta.row(src));
        }
        self.push(out, Op::GatherRows(a, index), "gather_rows")
    }

    /// Per-column standardization followed by a learned affine map.
    ///
    /// Returns the observed batch moments when `stats` is [`NormStats::Batch`]
    /// so the caller can maintain running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &NormStats,
        eps: f64,
    ) -> Result<(Var, Option<BatchMoments>), TensorError> {
        let tx = self.value(x);
        let (tg, tb) = (self.value(gamma), self.value(beta));
        let (m, n) = (tx.rows(), tx.cols());
        if tg.shape() != [1, n] || tb.shape() != [1, n] {
            return Err(shape_err("batch_norm", tx, tg));
        }
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                if m == 0 {
                    return Err(TensorError::Shape("batch norm over zero rows".into()));
                }
                let mut mean = vec![0.0; n];
                for r in 0..m {
                    for (acc, v) in mean.iter_mut().zip(tx.row(r)) {
                        *acc += v;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                let mut var = vec![0.0; n];
                for r in 0..m {
                    for ((acc, v), mu) in var.iter_mut().zip(tx.row(r)).zip(&mean) {
                        *acc += (v - mu) * (v - mu);
                    }
                }
                var.iter_mut().for_each(|v| *v /= m as f64);
                (mean, var, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != n || var.len() != n {
                    return Err(TensorError::Shape("running statistics width".into()));
                }
                (mean.clone(), var.clone(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(m, n);
        let mut out = Tensor::zeros(m, n);
        for r in 0..m {
            let xr = tx.row(r);
            for c in 0..n {
                let h = (xr[c] - mean[c]) * inv_std[c];
                xhat.set(r, c, h);
                out.set(r, c, tg.data()[c] * h + tb.data()[c]);
            }
        }
        let moments = batch.then(|| BatchMoments { mean, var });
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            },
            "batch_norm",
        )?;
        Ok((v, moments))
    }

    /// Weighted binary cross-entropy summed to a scalar:
    /// `Σ w · −(y·ln p + (1−y)·ln(1−p))`, with `p` clamped to
    /// `[BCE_CLAMP, 1 − BCE_CLAMP]`.
    pub fn bce(
        &mut self,
        p: Var,
        targets: Arc<Tensor>,
        weights: Arc<Tensor>,
    ) -> Result<Var, TensorError> {
        let tp = self.value(p);
        if tp.shape() != targets.shape() {
            return Err(shape_err("bce targets", tp, &targets));
        }
        if tp.shape() != weights.shape() {
            return Err(shape_err("bce weights", tp, &weights));
        }
        let total: f64 = tp
            .data()
            .iter()
            .zip(targets.data())
            .zip(weights.data())
            .map(|((&p, &y), &w)| if w == 0.0 { 0.0 } else { w * bce(p, y) })
            .sum();
        self.push(
            Tensor::scalar(total),
            Op::Bce {
                p,
                targets,
                weights,
            },
            "bce",
        )
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients, TensorError> {
        let out = self.value(output);
        if out.shape() != [1, 1] {
            return Err(TensorError::NotScalar(out.shape()));
        }
        let mut param_grads: Vec<Option<Tensor>> = vec![None; self.params.len()];
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(Tensor::scalar(1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => accumulate(&mut param_grads[id.index()], g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    let mut da = Tensor::zeros(m, k);
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        g.data(),
                        false,
                        tb.data(),
                        true,
                        0.0,
                        da.data_mut(),
                    );
                    let mut db = Tensor::zeros(k, n);
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        ta.data(),
                        true,
                        g.data(),
                        false,
                        0.0,
                        db.data_mut(),
                    );
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::MatMulT(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                    let mut da = Tensor::zeros(m, k);
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        g.data(),
                        false,
                        tb.data(),
                        false,
                        0.0,
                        da.data_mut(),
                    );
                    let mut db = Tensor::zeros(n, k);
                    gemm(
                        n,
                        m,
                        k,
                        1.0,
                        g.data(),
                        true,
                        ta.data(),
                        false,
                        0.0,
                        db.data_mut(),
                    );
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.0], g.clone());
                    accumulate(&mut grads[a.0], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b.0], g.map(|v| -v));
                    accumulate(&mut grads[a.0], g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads[a.0], hadamard(&g, tb));
                    accumulate(&mut grads[b.0], hadamard(&g, ta));
                }
                Op::AddRow(a, bias) => {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads[bias.0], db);
                    accumulate(&mut grads[a.0], g);
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    accumulate(&mut grads[a.0], g.map(|v| v * k));
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let mut dp = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        accumulate(&mut grads[p.0], dp);
                    }
                }
                Op::Transpose(a) => accumulate(&mut grads[a.0], g.transpose()),
                Op::OuterAdd(col, row) => {
                    let mut dc = Tensor::zeros(g.rows(), 1);
                    let mut dr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        dc.data_mut()[r] = gr.iter().sum();
                        for (d, v) in dr.data_mut().iter_mut().zip(gr) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads[col.0], dc);
                    accumulate(&mut grads[row.0], dr);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let d = zip_map(&g, x, |g, x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads[a.0], d);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    let s = *slope;
                    let d = zip_map(&g, x, |g, x| if x > 0.0 { g } else { s * g });
                    accumulate(&mut grads[a.0], d);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().expect("value");
                    let d = zip_map(&g, y, |g, y| g * y * (1.0 - y));
                    accumulate(&mut grads[a.0], d);
                }
                Op::MaskedRowSoftmax(a) => {
                    let y = node.value.as_ref().expect("value");
                    let mut d = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::MeanRows(a) => {
                    let m = self.value(*a).rows();
                    let mut d = Tensor::zeros(m, g.cols());
                    let inv = 1.0 / m as f64;
                    for r in 0..m {
                        for (o, v) in d.row_mut(r).iter_mut().zip(g.data()) {
                            *o = v * inv;
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::SumAll(a) => {
                    let ta = self.value(*a);
                    accumulate(
                        &mut grads[a.0],
                        Tensor::filled(ta.rows(), ta.cols(), g.data()[0]),
                    );
                }
                Op::RowL2Normalize(a, norms) => {
                    let y = node.value.as_ref().expect("value");
                    let mut d = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let n = norms[r];
                        if n > NORM_FLOOR {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for ((o, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                                *o = (gv - yv * dot) / n;
                            }
                        } else {
                            for (o, &gv) in d.row_mut(r).iter_mut().zip(gr) {
                                *o = gv / NORM_FLOOR;
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::GatherRows(a, index) => {
                    let ta = self.value(*a);
                    let mut d = Tensor::zeros(ta.rows(), ta.cols());
                    for (r, &src) in index.iter().enumerate() {
                        for (o, v) in d.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch,
                } => {
                    let tg = self.value(*gamma);
                    let (m, n) = (g.rows(), g.cols());
                    let mut dgamma = Tensor::zeros(1, n);
                    let mut dbeta = Tensor::zeros(1, n);
                    for r in 0..m {
                        for c in 0..n {
                            dgamma.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                            dbeta.data_mut()[c] += g.get(r, c);
                        }
                    }
                    let mut dx = Tensor::zeros(m, n);
                    if *batch {
                        let mf = m as f64;
                        for c in 0..n {
                            let gm = tg.data()[c];
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for r in 0..m {
                                let dh = g.get(r, c) * gm;
                                sum_d += dh;
                                sum_dx += dh * xhat.get(r, c);
                            }
                            for r in 0..m {
                                let dh = g.get(r, c) * gm;
                                let v =
                                    inv_std[c] / mf * (mf * dh - sum_d - xhat.get(r, c) * sum_dx);
                                dx.set(r, c, v);
                            }
                        }
                    } else {
                        for r in 0..m {
                            for c in 0..n {
                                dx.set(r, c, g.get(r, c) * tg.data()[c] * inv_std[c]);
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                    accumulate(&mut grads[gamma.0], dgamma);
                    accumulate(&mut grads[beta.0], dbeta);
                }
                Op::Bce {
                    p,
                    targets,
                    weights,
                } => {
                    let tp = self.value(*p);
                    let s = g.data()[0];
                    let data = tp
                        .data()
                        .iter()
                        .zip(targets.data())
                        .zip(weights.data())
                        .map(|((&p, &y), &w)| {
                            if w == 0.0 || p < BCE_CLAMP || p > 1.0 - BCE_CLAMP {
                                0.0
                            } else {
                                s * w * ((1.0 - y) / (1.0 - p) - y / p)
                            }
                        })
                        .collect();
                    let d = Tensor::from_vec(tp.rows(), tp.cols(), data)?;
                    accumulate(&mut grads[p.0], d);
                }
            }
        }

        let grads = param_grads
            .into_iter()
            .zip(self.params.iter())
            .map(|(g, (_, value))| g.unwrap_or_else(|| Tensor::zeros(value.rows(), value.cols())))
            .collect::<Vec<_>>();
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            return Err(TensorError::NonFiniteGradient(
                self.params.name(ParamId::new(bad)).to_owned(),
            ));
        }
        Ok(Gradients { grads })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of one probability against a 0/1 target, clamped.
pub fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("shapes agree")
}
