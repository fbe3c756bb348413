//! Dense row-major matrices and a dynamic reverse-mode tape.
//!
//! Every value in the model is a 2-D matrix (vectors are `1 × n`, scalars
//! are `1 × 1`). A [`Tape`] records each operation as it is evaluated and
//! [`Tape::backward`] replays the records in reverse to accumulate
//! gradients on leaves. The tape is rebuilt for every forward pass, so the
//! graph may differ between calls (ablation flags change the topology).
//!
//! Broadcasting is limited to `scalar × matrix` ([`Tape::scalar_mul`]) and
//! row-vector-to-matrix addition ([`Tape::add_row`]); every other shape mix
//! is a dimension error.

use std::fmt;

use crate::error::{Error, Result};

/// A dense `rows × cols` matrix of `f64` in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &[self.rows, self.cols])
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Tensor::new",
                format!("{} values for shape {rows}x{cols}", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("Tensor::from_rows", "ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// The single entry of a `1 × 1` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::dim(
                "Tensor::item",
                format!("shape {:?}", self.shape()),
            ));
        }
        Ok(self.data[0])
    }

    pub fn transpose(&self) -> Tensor {
        Tensor::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        matmul_into(
            &self.data,
            &other.data,
            &mut out.data,
            self.rows,
            self.cols,
            other.cols,
        );
        Ok(out)
    }

    /// Largest absolute difference between `self` and its transpose.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in 0..self.cols.min(self.rows) {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `out += a (m×k) · b (k×n)`, i-k-j loop order.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += a (m×k) · bᵀ` where `b` is `n×k`.
fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

/// `out += aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a_row.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
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

/// Numerically stable `ln(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row-wise softmax of `x / temperature`, computed with row-max subtraction.
pub fn row_softmax(x: &Tensor, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    let mut out = x.clone();
    for i in 0..x.rows {
        softmax_in_place(&mut out.data[i * x.cols..(i + 1) * x.cols], temperature);
    }
    Ok(out)
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(())
}

fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Row-wise log-softmax of `x / temperature`.
fn log_softmax_row(row: &[f64], temperature: f64, out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max) / temperature;
        total += o.exp();
    }
    let log_total = total.ln();
    for o in out.iter_mut() {
        *o -= log_total;
    }
}

/// `KL(p ‖ q) = Σ p ln(p / q)` for two probability rows.
pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim("kl_div", format!("{} vs {}", p.len(), q.len())));
    }
    for (name, row) in [("p", p), ("q", q)] {
        if let Some(v) = row.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain(format!(
                "kl_div: non-positive entry {v} in {name}"
            )));
        }
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!(
                "kl_div: {name} sums to {total}, expected 1"
            )));
        }
    }
    Ok(p.iter()
        .zip(q)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum())
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Affine(Var, f64),
    ScalarMul(Var, Var),
    Hadamard(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    MeanRows(Var),
    Transpose(Var),
    Sym0(Var),
    RowSoftmax(Var, f64),
    SoftmaxKl { p: Var, q: Var, temperature: f64 },
    Sum(Var),
    SliceCols(Var, usize),
    HCat(Vec<Var>),
    LayerNorm { input: Var, inv_std: Vec<f64> },
    BceWithLogits(Var, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Affine(..) => "affine",
            Op::ScalarMul(..) => "scalar_mul",
            Op::Hadamard(..) => "hadamard",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::MeanRows(..) => "mean_rows",
            Op::Transpose(..) => "transpose",
            Op::Sym0(..) => "sym0",
            Op::RowSoftmax(..) => "row_softmax",
            Op::SoftmaxKl { .. } => "softmax_kl",
            Op::Sum(..) => "sum",
            Op::SliceCols(..) => "slice_cols",
            Op::HCat(..) => "hcat",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BceWithLogits(..) => "bce_with_logits",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    label: Option<String>,
    grad: Option<Tensor>,
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn labeled_param(&mut self, value: Tensor, label: impl Into<String>) -> Var {
        let v = self.param(value);
        self.nodes[v.0].label = Some(label.into());
        v
    }

    /// Copy of `x` cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, x: Var) -> &Tensor {
        &self.nodes[x.0].value
    }

    pub fn scalar(&self, x: Var) -> Result<f64> {
        self.nodes[x.0].value.item()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, x: Var) -> Option<&Tensor> {
        self.nodes[x.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Describes the first node holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.value.is_finite()).then(|| match &n.label {
                Some(label) => format!("parameter '{label}' (node {i})"),
                None => format!("{} output (node {i})", n.op.name()),
            })
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data,
        };
        let rg = self.needs(&[a, b]);
        self.push(value, op, rg)
    }

    fn map_unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let rg = self.needs(&[x]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        Ok(self.zip_with(a, b, Op::Hadamard(a, b), |x, y| x * y))
    }

    /// `m×n + 1×n`, the row vector added to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows != 1 || tr.cols != ta.cols {
            return Err(Error::dim(
                "add_row",
                format!("{:?} + {:?}", ta.shape(), tr.shape()),
            ));
        }
        let mut value = ta.clone();
        for r in value.data.chunks_mut(tr.cols) {
            for (v, &b) in r.iter_mut().zip(&tr.data) {
                *v += b;
            }
        }
        let rg = self.needs(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    /// `factor · x + offset`, elementwise.
    pub fn affine(&mut self, x: Var, factor: f64, offset: f64) -> Var {
        let value = self.value(x).map(|v| factor * v + offset);
        let rg = self.needs(&[x]);
        self.push(value, Op::Affine(x, factor), rg)
    }

    /// `s · x` for a `1 × 1` tensor `s`.
    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var> {
        let sv = self
            .value(s)
            .item()
            .map_err(|_| Error::dim("scalar_mul", format!("scale {:?}", self.value(s).shape())))?;
        let value = self.value(x).map(|v| sv * v);
        let rg = self.needs(&[s, x]);
        Ok(self.push(value, Op::ScalarMul(s, x), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    /// Column-wise mean over rows: `m×n → 1×n`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rows == 0 {
            return Err(Error::dim("mean_rows", "no rows"));
        }
        let mut out = vec![0.0; t.cols];
        for r in t.data.chunks(t.cols) {
            for (o, &v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        let inv = 1.0 / t.rows as f64;
        for o in &mut out {
            *o *= inv;
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::row_vector(out), Op::MeanRows(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let rg = self.needs(&[x]);
        self.push(value, Op::Transpose(x), rg)
    }

    /// `(M + Mᵀ)/2` with the diagonal set to zero.
    pub fn sym0(&mut self, x: Var) -> Result<Var> {
        let value = sym0(self.value(x))?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::Sym0(x), rg))
    }

    pub fn row_softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let value = row_softmax(self.value(x), temperature)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::RowSoftmax(x, temperature), rg))
    }

    /// Per-row `KL(softmax(p/τ) ‖ softmax(q/τ))` from logits, as an `m × 1`
    /// column. Evaluated through log-softmax so no probability is divided.
    pub fn softmax_kl(&mut self, p_logits: Var, q_logits: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        self.same_shape("softmax_kl", p_logits, q_logits)?;
        let (tp, tq) = (self.value(p_logits), self.value(q_logits));
        let n = tp.cols;
        let mut out = Vec::with_capacity(tp.rows);
        let mut lp = vec![0.0; n];
        let mut lq = vec![0.0; n];
        for i in 0..tp.rows {
            log_softmax_row(tp.row(i), temperature, &mut lp);
            log_softmax_row(tq.row(i), temperature, &mut lq);
            out.push(lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum());
        }
        let value = Tensor {
            rows: tp.rows,
            cols: 1,
            data: out,
        };
        let rg = self.needs(&[p_logits, q_logits]);
        Ok(self.push(
            value,
            Op::SoftmaxKl {
                p: p_logits,
                q: q_logits,
                temperature,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data.iter().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Columns `start .. start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.cols {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {start}..{} of {:?}", start + len, t.shape()),
            ));
        }
        let value = Tensor::from_fn(t.rows, len, |i, j| t.get(i, start + j));
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::SliceCols(x, start), rg))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn hcat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(p) => self.value(*p).rows,
            None => return Err(Error::dim("hcat", "no inputs")),
        };
        if parts.iter().any(|p| self.value(*p).rows != rows) {
            return Err(Error::dim("hcat", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let rg = self.needs(parts);
        Ok(self.push(Tensor { rows, cols, data }, Op::HCat(parts.to_vec()), rg))
    }

    /// Per-row standardisation to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        const EPS: f64 = 1e-5;
        let t = self.value(x);
        let mut value = t.clone();
        let mut inv_std = Vec::with_capacity(t.rows);
        for r in value.data.chunks_mut(t.cols) {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + EPS).sqrt();
            for v in r.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.needs(&[x]);
        self.push(value, Op::LayerNorm { input: x, inv_std }, rg)
    }

    /// Binary cross-entropy of a `1 × 1` logit against `target ∈ [0, 1]`.
    pub fn bce_with_logits(&mut self, logit: Var, target: f64) -> Result<Var> {
        let x = self.scalar(logit)?;
        let loss = softplus(x) - x * target;
        let rg = self.needs(&[logit]);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits(logit, target), rg))
    }

    /// Accumulates `d loss / d leaf` into every differentiable leaf reachable
    /// from `loss`. Repeated calls add to the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &mut self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let [rows, cols] = node.value.shape();
                let acc = node.grad.get_or_insert_with(|| Tensor::zeros(rows, cols));
                add_into(&mut acc.data, &g);
                continue;
            }
            self.propagate(id, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[id].value;
        let send = |v: Var, adj: &mut [Option<Vec<f64>>], f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.rows, ta.cols, tb.cols);
                send(*a, adj, &mut |s| matmul_nt_into(g, &tb.data, s, m, n, k));
                send(*b, adj, &mut |s| matmul_tn_into(&ta.data, g, s, m, k, n));
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    send(*v, adj, &mut |s| add_into(s, g));
                }
            }
            Op::Sub(a, b) => {
                send(*a, adj, &mut |s| add_into(s, g));
                send(*b, adj, &mut |s| {
                    for (x, d) in s.iter_mut().zip(g) {
                        *x -= d;
                    }
                });
            }
            Op::AddRow(a, row) => {
                send(*a, adj, &mut |s| add_into(s, g));
                let cols = out.cols;
                send(*row, adj, &mut |s| {
                    for r in g.chunks(cols) {
                        add_into(s, r);
                    }
                });
            }
            Op::Affine(x, factor) => {
                send(*x, adj, &mut |s| {
                    for (a, d) in s.iter_mut().zip(g) {
                        *a += factor * d;
                    }
                });
            }
            Op::ScalarMul(sc, x) => {
                let sv = nodes[sc.0].value.data[0];
                let tx = &nodes[x.0].value;
                send(*sc, adj, &mut |s| {
                    s[0] += tx.data.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                });
                send(*x, adj, &mut |s| {
                    for (a, d) in s.iter_mut().zip(g) {
                        *a += sv * d;
                    }
                });
            }
            Op::Hadamard(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                send(*a, adj, &mut |s| {
                    for ((x, d), y) in s.iter_mut().zip(g).zip(&tb.data) {
                        *x += d * y;
                    }
                });
                send(*b, adj, &mut |s| {
                    for ((x, d), y) in s.iter_mut().zip(g).zip(&ta.data) {
                        *x += d * y;
                    }
                });
            }
            Op::Sigmoid(x) => {
                send(*x, adj, &mut |s| {
                    for ((a, d), y) in s.iter_mut().zip(g).zip(&out.data) {
                        *a += d * y * (1.0 - y);
                    }
                });
            }
            Op::Relu(x) => {
                let tx = &nodes[x.0].value;
                send(*x, adj, &mut |s| {
                    for ((a, d), v) in s.iter_mut().zip(g).zip(&tx.data) {
                        if *v > 0.0 {
                            *a += d;
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let tx = &nodes[x.0].value;
                let inv = 1.0 / tx.rows as f64;
                send(*x, adj, &mut |s| {
                    for r in s.chunks_mut(tx.cols) {
                        for (a, d) in r.iter_mut().zip(g) {
                            *a += d * inv;
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (out.rows, out.cols);
                send(*x, adj, &mut |s| {
                    // input is c×r
                    for i in 0..r {
                        for j in 0..c {
                            s[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Sym0(x) => {
                let n = out.rows;
                send(*x, adj, &mut |s| {
                    for i in 0..n {
                        for j in 0..n {
                            if i != j {
                                s[i * n + j] += 0.5 * (g[i * n + j] + g[j * n + i]);
                            }
                        }
                    }
                });
            }
            Op::RowSoftmax(x, temperature) => {
                let cols = out.cols;
                send(*x, adj, &mut |s| {
                    for ((sr, gr), yr) in s
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(out.data.chunks(cols))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((a, d), y) in sr.iter_mut().zip(gr).zip(yr) {
                            *a += y * (d - dot) / temperature;
                        }
                    }
                });
            }
            Op::SoftmaxKl { p, q, temperature } => {
                let (tp, tq) = (&nodes[p.0].value, &nodes[q.0].value);
                let n = tp.cols;
                let mut lp = vec![0.0; n];
                let mut lq = vec![0.0; n];
                let mut dp = vec![0.0; tp.len()];
                let mut dq = vec![0.0; tp.len()];
                for i in 0..tp.rows {
                    log_softmax_row(tp.row(i), *temperature, &mut lp);
                    log_softmax_row(tq.row(i), *temperature, &mut lq);
                    let kl = out.data[i];
                    let gi = g[i];
                    for j in 0..n {
                        let pj = lp[j].exp();
                        let qj = lq[j].exp();
                        dp[i * n + j] = gi * pj * ((lp[j] - lq[j]) - kl) / temperature;
                        dq[i * n + j] = gi * (qj - pj) / temperature;
                    }
                }
                send(*p, adj, &mut |s| add_into(s, &dp));
                send(*q, adj, &mut |s| add_into(s, &dq));
            }
            Op::Sum(x) => {
                send(*x, adj, &mut |s| {
                    for a in s.iter_mut() {
                        *a += g[0];
                    }
                });
            }
            Op::SliceCols(x, start) => {
                let tx = &nodes[x.0].value;
                let len = out.cols;
                send(*x, adj, &mut |s| {
                    for i in 0..out.rows {
                        for j in 0..len {
                            s[i * tx.cols + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::HCat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pc = nodes[p.0].value.cols;
                    send(*p, adj, &mut |s| {
                        for i in 0..out.rows {
                            for j in 0..pc {
                                s[i * pc + j] += g[i * out.cols + offset + j];
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::LayerNorm { input, inv_std } => {
                let cols = out.cols;
                send(*input, adj, &mut |s| {
                    for (((sr, gr), yr), inv) in s
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(out.data.chunks(cols))
                        .zip(inv_std)
                    {
                        let n = cols as f64;
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((a, d), y) in sr.iter_mut().zip(gr).zip(yr) {
                            *a += inv * (d - mean_g - y * mean_gy);
                        }
                    }
                });
            }
            Op::BceWithLogits(x, target) => {
                let xv = nodes[x.0].value.data[0];
                send(*x, adj, &mut |s| s[0] += g[0] * (sigmoid(xv) - target));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// `(M + Mᵀ)/2 − diag(diag(M))` on a plain matrix.
pub fn sym0(m: &Tensor) -> Result<Tensor> {
    if m.rows != m.cols {
        return Err(Error::dim("sym0", format!("non-square {:?}", m.shape())));
    }
    Ok(Tensor::from_fn(m.rows, m.cols, |i, j| {
        if i == j {
            0.0
        } else {
            0.5 * (m.get(i, j) + m.get(j, i))
        }
    }))
}
