//! Dense `f64` tensors, a reverse-mode tape and the AdamW optimizer.
//!
//! A [`Tape`] borrows a [`ParamSet`] immutably, records every operation with
//! the values its adjoint needs, and [`Tape::backward`] returns gradients for
//! every parameter. Matrix products go through `matrixmultiply`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

type Result<T> = std::result::Result<T, NumericsError>;

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(mismatch("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, rest @ ..] => (*r, rest.iter().product()),
    }
}

/// `c = a·b + beta·c` for strided row/column views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].fill(0.0);
        }
        return;
    }
    // SAFETY: strides describe views that stay inside `a`, `b` and `c`,
    // which the callers size as m×k, k×n and m×n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain (untracked) row-major matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = rows_cols(&a.shape);
    let (k2, n) = rows_cols(&b.shape);
    if k != k2 {
        return Err(mismatch("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, k, 1, &b.data, n, 1, 0.0, &mut out);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

// ---------------------------------------------------------------------------
// Parameters

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Gradients aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Tensor>);

impl Grads {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Grads(params.iter().map(|p| Tensor::zeros(p.value.shape())).collect())
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.0 {
            for x in &mut t.data {
                *x *= c;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }

    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|t| t.data.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

// ---------------------------------------------------------------------------
// Tape

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One cross-entropy term: softmax over columns `start..start+len` of `row`,
/// scored against column `start + target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CeItem {
    pub row: usize,
    pub start: usize,
    pub len: usize,
    pub target: usize,
}

#[derive(Debug)]
enum Op {
    Param(ParamId),
    Input,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SoftmaxRows(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    AddBlock {
        x: Var,
        block: Var,
        offset: usize,
    },
    ExtractBlock {
        x: Var,
        offset: usize,
    },
    Reshape(Var),
    SymmetrizePairs {
        x: Var,
        m: usize,
    },
    CrossEntropy {
        logits: Var,
        items: Vec<CeItem>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || shape.iter().product::<usize>() == value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id).data(),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.shape(v).to_vec(),
            data: self.value(v).to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf for a parameter; repeated calls return the same variable.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let shape = self.params.get(id).shape().to_vec();
        let v = self.push(shape, Vec::new(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Constant leaf (no gradient).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Input)
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        rows_cols(self.shape(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (k2, n) = self.rc(b);
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), k, 1, self.value(b), n, 1, 0.0, &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (n, k2) = self.rc(b);
        if k != k2 {
            return Err(mismatch("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), k, 1, self.value(b), 1, k, 0.0, &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    /// Adds a length-`n` row vector to every row of `a: [m, n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.rc(a);
        if self.value(bias).len() != n {
            return Err(mismatch("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(a)
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.rc(x);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gain)));
        }
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Gathers rows of `table: [V, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.rc(table);
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumericsError::IndexOutOfRange { index: id, size: v });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (_, n) = self.rc(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        self.push(self.shape(a).to_vec(), out, Op::SoftmaxRows(a))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.rc(x);
        if start + len > n {
            return Err(NumericsError::IndexOutOfRange { index: start + len, size: n });
        }
        let xv = self.value(x);
        let out: Vec<f64> = (0..m)
            .flat_map(|r| xv[r * n + start..r * n + start + len].iter().copied())
            .collect();
        Ok(self.push(vec![m, len], out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(mismatch("concat_cols", &[], &[]));
        };
        let (m, _) = self.rc(first);
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.rc(p);
            if pm != m {
                return Err(mismatch("concat_cols", self.shape(first), self.shape(p)));
            }
            total += pn;
        }
        let mut out = vec![0.0; m * total];
        let mut col = 0;
        for &p in parts {
            let (_, pn) = self.rc(p);
            let pv = self.value(p);
            for r in 0..m {
                out[r * total + col..r * total + col + pn].copy_from_slice(&pv[r * pn..(r + 1) * pn]);
            }
            col += pn;
        }
        Ok(self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec())))
    }

    /// Adds square `block: [r, r]` into square `x: [S, S]` at `(offset, offset)`.
    pub fn add_block(&mut self, x: Var, block: Var, offset: usize) -> Result<Var> {
        let (s, s2) = self.rc(x);
        let (r, r2) = self.rc(block);
        if s != s2 || r != r2 || offset + r > s {
            return Err(mismatch("add_block", self.shape(x), self.shape(block)));
        }
        let mut out = self.value(x).to_vec();
        let bv = self.value(block);
        for i in 0..r {
            for j in 0..r {
                out[(offset + i) * s + offset + j] += bv[i * r + j];
            }
        }
        Ok(self.push(vec![s, s], out, Op::AddBlock { x, block, offset }))
    }

    /// Square `[size, size]` block of `x` starting at `(offset, offset)`.
    pub fn extract_block(&mut self, x: Var, offset: usize, size: usize) -> Result<Var> {
        let (s, s2) = self.rc(x);
        if s != s2 || offset + size > s {
            return Err(mismatch("extract_block", self.shape(x), &[offset, size]));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(size * size);
        for i in 0..size {
            out.extend_from_slice(&xv[(offset + i) * s + offset..(offset + i) * s + offset + size]);
        }
        Ok(self.push(vec![size, size], out, Op::ExtractBlock { x, offset }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(mismatch("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x)))
    }

    /// For `x: [m*m, c]` indexed by pair `(i, j)`, returns
    /// `(x[(i,j)] + x[(j,i)]) / 2`.
    pub fn symmetrize_pairs(&mut self, x: Var, m: usize) -> Result<Var> {
        let (rows, c) = self.rc(x);
        if rows != m * m {
            return Err(mismatch("symmetrize_pairs", self.shape(x), &[m * m]));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; rows * c];
        for i in 0..m {
            for j in 0..m {
                let a = (i * m + j) * c;
                let b = (j * m + i) * c;
                for k in 0..c {
                    out[a + k] = 0.5 * (xv[a + k] + xv[b + k]);
                }
            }
        }
        Ok(self.push(vec![rows, c], out, Op::SymmetrizePairs { x, m }))
    }

    /// Summed cross-entropy `-log softmax(row slice)[target]` over `items`.
    pub fn cross_entropy(&mut self, logits: Var, items: &[CeItem]) -> Result<Var> {
        let (m, n) = self.rc(logits);
        let lv = self.value(logits);
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(items.iter().map(|i| i.len).sum());
        for it in items {
            if it.row >= m || it.start + it.len > n || it.target >= it.len {
                return Err(NumericsError::IndexOutOfRange {
                    index: it.start + it.target,
                    size: n,
                });
            }
            let row = &lv[it.row * n + it.start..it.row * n + it.start + it.len];
            let lse = log_sum_exp(row);
            total += lse - row[it.target];
            probs.extend(row.iter().map(|x| (x - lse).exp()));
        }
        Ok(self.push(
            vec![1],
            vec![total],
            Op::CrossEntropy {
                logits,
                items: items.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar; returns `∂loss/∂param` for every parameter.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.nodes[loss.0].value.len() != 1 && !matches!(self.nodes[loss.0].op, Op::Param(_)) {
            return Err(NumericsError::NotScalar(self.shape(loss).to_vec()));
        }
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|_| Vec::new()).collect();
        let mut out = Grads::zeros_like(self.params);
        grads[loss.0] = vec![1.0];

        fn acc(grads: &mut [Vec<f64>], v: Var, len: usize) -> &mut Vec<f64> {
            let g = &mut grads[v.0];
            if g.is_empty() {
                *g = vec![0.0; len];
            }
            g
        }

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_empty() {
                continue;
            }
            let gy = std::mem::take(&mut grads[idx]);
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    for (o, g) in out.0[id.0].data.iter_mut().zip(&gy) {
                        *o += g;
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.rc(*a);
                    let (_, n) = self.rc(*b);
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // dA = dC·Bᵀ ; dB = Aᵀ·dC
                    gemm(m, n, k, &gy, n, 1, bv, 1, n, 1.0, acc(&mut grads, *a, m * k));
                    gemm(k, m, n, av, 1, k, &gy, n, 1, 1.0, acc(&mut grads, *b, k * n));
                }
                Op::MatMulT(a, b) => {
                    let (m, k) = self.rc(*a);
                    let (n, _) = self.rc(*b);
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // C = A·Bᵀ: dA = dC·B ; dB = dCᵀ·A
                    gemm(m, n, k, &gy, n, 1, bv, k, 1, 1.0, acc(&mut grads, *a, m * k));
                    gemm(n, m, k, &gy, 1, n, av, k, 1, 1.0, acc(&mut grads, *b, n * k));
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        let g = acc(&mut grads, v, gy.len());
                        for (x, y) in g.iter_mut().zip(&gy) {
                            *x += y;
                        }
                    }
                }
                Op::AddRow(a, bias) => {
                    let n = self.value(*bias).len();
                    let g = acc(&mut grads, *a, gy.len());
                    for (x, y) in g.iter_mut().zip(&gy) {
                        *x += y;
                    }
                    let gb = acc(&mut grads, *bias, n);
                    for row in gy.chunks(n.max(1)) {
                        for (x, y) in gb.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let g = acc(&mut grads, *a, gy.len());
                    for (x, y) in g.iter_mut().zip(&gy) {
                        *x += c * y;
                    }
                }
                Op::Gelu(a) => {
                    let av = self.value(*a);
                    let g = acc(&mut grads, *a, gy.len());
                    for ((x, y), &v) in g.iter_mut().zip(&gy).zip(av) {
                        *x += y * gelu_grad(v);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let (m, n) = self.rc(*x);
                    let gv = self.value(*gain).to_vec();
                    {
                        let gg = acc(&mut grads, *gain, n);
                        for r in 0..m {
                            for c in 0..n {
                                gg[c] += gy[r * n + c] * xhat[r * n + c];
                            }
                        }
                    }
                    {
                        let gb = acc(&mut grads, *bias, n);
                        for r in 0..m {
                            for c in 0..n {
                                gb[c] += gy[r * n + c];
                            }
                        }
                    }
                    let gx = acc(&mut grads, *x, m * n);
                    let mut dxhat = vec![0.0; n];
                    for r in 0..m {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..n {
                            let d = gy[r * n + c] * gv[c];
                            dxhat[c] = d;
                            mean_d += d;
                            mean_dx += d * xhat[r * n + c];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for c in 0..n {
                            gx[r * n + c] += rstd[r] * (dxhat[c] - mean_d - xhat[r * n + c] * mean_dx);
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    let (v, d) = self.rc(*table);
                    let g = acc(&mut grads, *table, v * d);
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            g[id * d + c] += gy[r * d + c];
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let (_, n) = self.rc(*a);
                    let y = &node.value;
                    let g = acc(&mut grads, *a, gy.len());
                    for ((gr, yr), dyr) in g.chunks_mut(n).zip(y.chunks(n)).zip(gy.chunks(n)) {
                        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            gr[c] += yr[c] * (dyr[c] - dot);
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    let (m, n) = self.rc(*x);
                    let len = node.shape[1];
                    let g = acc(&mut grads, *x, m * n);
                    for r in 0..m {
                        for c in 0..len {
                            g[r * n + start + c] += gy[r * len + c];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let (m, total) = (node.shape[0], node.shape[1]);
                    let mut col = 0;
                    for &p in parts {
                        let (_, pn) = self.rc(p);
                        let g = acc(&mut grads, p, m * pn);
                        for r in 0..m {
                            for c in 0..pn {
                                g[r * pn + c] += gy[r * total + col + c];
                            }
                        }
                        col += pn;
                    }
                }
                Op::AddBlock { x, block, offset } => {
                    let s = node.shape[0];
                    let (r, _) = self.rc(*block);
                    {
                        let g = acc(&mut grads, *x, s * s);
                        for (a, b) in g.iter_mut().zip(&gy) {
                            *a += b;
                        }
                    }
                    let g = acc(&mut grads, *block, r * r);
                    for i in 0..r {
                        for j in 0..r {
                            g[i * r + j] += gy[(offset + i) * s + offset + j];
                        }
                    }
                }
                Op::ExtractBlock { x, offset } => {
                    let (s, _) = self.rc(*x);
                    let size = node.shape[0];
                    let g = acc(&mut grads, *x, s * s);
                    for i in 0..size {
                        for j in 0..size {
                            g[(offset + i) * s + offset + j] += gy[i * size + j];
                        }
                    }
                }
                Op::Reshape(x) => {
                    let g = acc(&mut grads, *x, gy.len());
                    for (a, b) in g.iter_mut().zip(&gy) {
                        *a += b;
                    }
                }
                Op::SymmetrizePairs { x, m } => {
                    let (rows, c) = (node.shape[0], node.shape[1]);
                    let m = *m;
                    let g = acc(&mut grads, *x, rows * c);
                    for i in 0..m {
                        for j in 0..m {
                            let a = (i * m + j) * c;
                            let b = (j * m + i) * c;
                            for k in 0..c {
                                g[a + k] += 0.5 * (gy[a + k] + gy[b + k]);
                            }
                        }
                    }
                }
                Op::CrossEntropy { logits, items, probs } => {
                    let (m, n) = self.rc(*logits);
                    let scale = gy[0];
                    let g = acc(&mut grads, *logits, m * n);
                    let mut off = 0;
                    for it in items {
                        let base = it.row * n + it.start;
                        for c in 0..it.len {
                            let onehot = if c == it.target { 1.0 } else { 0.0 };
                            g[base + c] += scale * (probs[off + c] - onehot);
                        }
                        off += it.len;
                    }
                }
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One decoupled-weight-decay Adam update over flat slices. `step` is the
/// 1-based update count used for bias correction.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    cfg: &AdamWConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || m.len() != n || v.len() != n {
        return Err(mismatch("adamw_step", &[n], &[grads.len(), m.len(), v.len()]));
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for (((p, &g), mi), vi) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
        let mhat = *mi / bc1;
        let vhat = *vi / bc2;
        *p -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *p);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        AdamW {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &Grads) -> Result<()> {
        if grads.0.len() != params.len() || self.m.len() != params.len() {
            return Err(mismatch("adamw", &[params.len()], &[grads.0.len()]));
        }
        self.step += 1;
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(&grads.0)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            adamw_step(&mut p.value.data, &g.data, &mut m.data, &mut v.data, self.step, &self.config)?;
        }
        Ok(())
    }
}
