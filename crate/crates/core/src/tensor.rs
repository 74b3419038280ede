//! Dense f32 tensors and a reverse-mode autodiff tape.
//!
//! Values are stored in 32-bit floats; reductions (matmul inner products,
//! softmax denominators, means, losses) accumulate in 64-bit. A `Tape` is
//! explicit and per-forward-pass: leaf tensors are recorded on it, forward
//! operations append nodes, and `backward` on a scalar root returns one
//! gradient per gradient-requiring node. Distinct tapes share no state, so
//! batch items can run on separate tapes in parallel.

use crate::error::{Error, Result};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract {
                op: "Tensor::new",
                msg: format!("shape {:?} implies {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// 2-D matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        debug_assert!(self.is_matrix());
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert!(self.is_matrix());
        self.shape[1]
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        debug_assert!(self.is_matrix());
        self.data[i * self.shape[1] + j]
    }

    /// Row `i` of a matrix as a slice.
    pub fn row(&self, i: usize) -> &[f32] {
        debug_assert!(self.is_matrix());
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Identifier of a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    MatMulNT { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    AddBias { x: TensorId, bias: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Relu { x: TensorId },
    SoftmaxRows { x: TensorId },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, eps: f32 },
    CrossEntropy { logits: TensorId, labels: Vec<usize> },
    ConcatRows { parts: Vec<TensorId> },
    ConcatCols { parts: Vec<TensorId> },
    EmbeddingLookup { table: TensorId, ids: Vec<u32> },
    MaxPoolRows { x: TensorId, argmax: Vec<usize> },
    MeanPoolRows { x: TensorId, valid: usize },
    TakeRow { x: TensorId, index: usize },
    Scale { x: TensorId, factor: f32 },
    SumAll { x: TensorId },
    /// y = x * mask * factor, mask constant (standard dropout, inverse rescale).
    MulMaskScaled { x: TensorId, mask: Vec<f32>, factor: f32 },
    /// Row renormalisation of a masked matrix; fully-masked rows fall back to
    /// the unmasked input row (identity).
    MaskRenormRows { x: TensorId, mask: Vec<f32>, row_sum: Vec<f64>, fallback: Vec<bool> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Operations append nodes in topological order.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by tape node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. the given node. `None` for nodes that do
    /// not require gradients; unreachable gradient-requiring nodes get zeros.
    pub fn wrt(&self, id: TensorId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

fn finite_or_err(op: &'static str, data: &[f32]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// A[m×k]·B[k×n] with a per-row f64 accumulator (reductions stay 64-bit).
fn matmul_f64acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let mut row = vec![0.0f64; n];
    for i in 0..m {
        row.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let aip = a[i * k + p] as f64;
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (acc, &bv) in row.iter_mut().zip(brow) {
                *acc += aip * bv as f64;
            }
        }
        for (o, &acc) in out[i * n..(i + 1) * n].iter_mut().zip(row.iter()) {
            *o = acc as f32;
        }
    }
    out
}

/// A[m×k]·Bᵀ for B[n×k]: rows of A dotted with rows of B, f64 accumulation.
fn matmul_nt_f64acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av as f64 * bv as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    out
}

/// Aᵀ[k×m]·B[m×n] for A[m×k]: accumulates k×n in f64 then rounds once.
fn matmul_tn_f64acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p] as f64;
            if aip == 0.0 {
                continue;
            }
            let dst = &mut acc[p * n..(p + 1) * n];
            for (d, &bv) in dst.iter_mut().zip(brow) {
                *d += aip * bv as f64;
            }
        }
    }
    acc.iter().map(|&v| v as f32).collect()
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        self.nodes[id.0].value.data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that participates in gradients (clones the parameter tensor).
    pub fn param(&mut self, value: &Tensor) -> TensorId {
        self.leaf(value.clone(), true)
    }

    /// Leaf excluded from gradients.
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { value, op, requires_grad });
        id
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── Forward operations ───────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = matmul_f64acc(ta.data(), tb.data(), m, k, n);
        finite_or_err("matmul", &out)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul { a, b }, rg))
    }

    /// C = A · Bᵀ for A: m×k, B: n×k (saves materialising the transpose).
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.cols() {
            return Err(Error::Dimension {
                op: "matmul_nt",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let out = matmul_nt_f64acc(ta.data(), tb.data(), m, k, n);
        finite_or_err("matmul_nt", &out)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMulNT { a, b }, rg))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out: Vec<f32> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        finite_or_err("add", &out)?;
        let shape = ta.shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor { shape, data: out }, Op::Add { a, b }, rg))
    }

    /// x: m×n plus a length-n bias broadcast over rows.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if !tx.is_matrix() || tb.shape().len() != 1 || tb.shape()[0] != tx.cols() {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, n) = (tx.rows(), tx.cols());
        let mut out = tx.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += tb.data()[j];
            }
        }
        finite_or_err("add_bias", &out)?;
        let rg = self.requires(x) || self.requires(bias);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::AddBias { x, bias }, rg))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension {
                op: "sub",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out: Vec<f32> = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        finite_or_err("sub", &out)?;
        let shape = ta.shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor { shape, data: out }, Op::Sub { a, b }, rg))
    }

    pub fn mul_elementwise(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension {
                op: "mul_elementwise",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out: Vec<f32> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        finite_or_err("mul_elementwise", &out)?;
        let shape = ta.shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor { shape, data: out }, Op::Mul { a, b }, rg))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let tx = self.value(x);
        let out: Vec<f32> = tx.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = tx.shape().to_vec();
        let rg = self.requires(x);
        Ok(self.push(Tensor { shape, data: out }, Op::Relu { x }, rg))
    }

    /// Row-wise softmax with max-subtraction; denominators accumulate in f64.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let tx = self.value(x);
        if !tx.is_matrix() {
            return Err(Error::Contract {
                op: "softmax_rows",
                msg: format!("expected 2-D input, got shape {:?}", tx.shape()),
            });
        }
        let (m, n) = (tx.rows(), tx.cols());
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &tx.data()[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            let mut exps = vec![0.0f64; n];
            for j in 0..n {
                let e = ((row[j] - max) as f64).exp();
                exps[j] = e;
                denom += e;
            }
            for j in 0..n {
                out[i * n + j] = (exps[j] / denom) as f32;
            }
        }
        finite_or_err("softmax_rows", &out)?;
        let rg = self.requires(x);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::SoftmaxRows { x }, rg))
    }

    /// Per-row layer normalisation with affine gain/bias (both length d).
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f32) -> Result<TensorId> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        if !tx.is_matrix() {
            return Err(Error::Contract {
                op: "layer_norm",
                msg: format!("expected 2-D input, got shape {:?}", tx.shape()),
            });
        }
        let d = tx.cols();
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(Error::Contract { op: "layer_norm", msg: format!("eps must be > 0, got {eps}") });
        }
        let m = tx.rows();
        let mut out = vec![0.0f32; m * d];
        for i in 0..m {
            let row = &tx.data()[i * d..(i + 1) * d];
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps as f64).sqrt();
            for j in 0..d {
                let norm = (row[j] as f64 - mean) * inv_std;
                out[i * d + j] = (norm * tg.data()[j] as f64 + tb.data()[j] as f64) as f32;
            }
        }
        finite_or_err("layer_norm", &out)?;
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(Tensor { shape: vec![m, d], data: out }, Op::LayerNorm { x, gain, bias, eps }, rg))
    }

    /// Mean over rows of −log softmax(logits)[label]. Output is a scalar.
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let tl = self.value(logits);
        if !tl.is_matrix() || tl.rows() != labels.len() {
            return Err(Error::Contract {
                op: "cross_entropy",
                msg: format!("logits shape {:?} vs {} labels", tl.shape(), labels.len()),
            });
        }
        let (m, c) = (tl.rows(), tl.cols());
        for &lab in labels {
            if lab >= c {
                return Err(Error::Index { op: "cross_entropy", index: lab, bound: c });
            }
        }
        let mut total = 0.0f64;
        for i in 0..m {
            let row = &tl.data()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let denom: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
            let log_p = (row[labels[i]] - max) as f64 - denom.ln();
            total -= log_p;
        }
        let loss = (total / m as f64) as f32;
        finite_or_err("cross_entropy", &[loss])?;
        let rg = self.requires(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec() }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract { op: "concat_rows", msg: "no parts".into() });
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if !t.is_matrix() || t.cols() != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.rows();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(Tensor { shape: vec![rows, cols], data: out }, Op::ConcatRows { parts: parts.to_vec() }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract { op: "concat_cols", msg: "no parts".into() });
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if !t.is_matrix() || t.rows() != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            cols += t.cols();
        }
        let mut out = vec![0.0f32; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for i in 0..rows {
                out[i * cols + offset..i * cols + offset + c]
                    .copy_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(Tensor { shape: vec![rows, cols], data: out }, Op::ConcatCols { parts: parts.to_vec() }, rg))
    }

    /// Gather rows of a V×d table by token id; gradients scatter back.
    pub fn embedding_lookup(&mut self, table: TensorId, ids: &[u32]) -> Result<TensorId> {
        let tt = self.value(table);
        if !tt.is_matrix() {
            return Err(Error::Contract {
                op: "embedding_lookup",
                msg: format!("expected 2-D table, got shape {:?}", tt.shape()),
            });
        }
        let (v, d) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(Error::Index { op: "embedding_lookup", index: id, bound: v });
            }
            out.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let rg = self.requires(table);
        Ok(self.push(
            Tensor { shape: vec![ids.len(), d], data: out },
            Op::EmbeddingLookup { table, ids: ids.to_vec() },
            rg,
        ))
    }

    /// Column-wise max over the first `valid` rows. Ties resolve to the
    /// earliest row, so gradients are deterministic.
    pub fn max_pool_rows(&mut self, x: TensorId, valid: usize) -> Result<TensorId> {
        let tx = self.value(x);
        if !tx.is_matrix() || valid == 0 || valid > tx.rows() {
            return Err(Error::Contract {
                op: "max_pool_rows",
                msg: format!("valid rows {} out of range for shape {:?}", valid, tx.shape()),
            });
        }
        let n = tx.cols();
        let mut out = vec![f32::NEG_INFINITY; n];
        let mut argmax = vec![0usize; n];
        for i in 0..valid {
            for j in 0..n {
                let v = tx.data()[i * n + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let rg = self.requires(x);
        Ok(self.push(Tensor { shape: vec![1, n], data: out }, Op::MaxPoolRows { x, argmax }, rg))
    }

    /// Column-wise mean over the first `valid` rows.
    pub fn mean_pool_rows(&mut self, x: TensorId, valid: usize) -> Result<TensorId> {
        let tx = self.value(x);
        if !tx.is_matrix() || valid == 0 || valid > tx.rows() {
            return Err(Error::Contract {
                op: "mean_pool_rows",
                msg: format!("valid rows {} out of range for shape {:?}", valid, tx.shape()),
            });
        }
        let n = tx.cols();
        let mut out = vec![0.0f32; n];
        for j in 0..n {
            let mut acc = 0.0f64;
            for i in 0..valid {
                acc += tx.data()[i * n + j] as f64;
            }
            out[j] = (acc / valid as f64) as f32;
        }
        let rg = self.requires(x);
        Ok(self.push(Tensor { shape: vec![1, n], data: out }, Op::MeanPoolRows { x, valid }, rg))
    }

    /// Row `index` of a matrix as a 1×n tensor.
    pub fn take_row(&mut self, x: TensorId, index: usize) -> Result<TensorId> {
        let tx = self.value(x);
        if !tx.is_matrix() || index >= tx.rows() {
            return Err(Error::Index { op: "take_row", index, bound: tx.rows() });
        }
        let n = tx.cols();
        let out = tx.data()[index * n..(index + 1) * n].to_vec();
        let rg = self.requires(x);
        Ok(self.push(Tensor { shape: vec![1, n], data: out }, Op::TakeRow { x, index }, rg))
    }

    pub fn scale(&mut self, x: TensorId, factor: f32) -> Result<TensorId> {
        let tx = self.value(x);
        let out: Vec<f32> = tx.data().iter().map(|&v| v * factor).collect();
        finite_or_err("scale", &out)?;
        let shape = tx.shape().to_vec();
        let rg = self.requires(x);
        Ok(self.push(Tensor { shape, data: out }, Op::Scale { x, factor }, rg))
    }

    /// Sum of all entries as a scalar (f64 accumulation).
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let tx = self.value(x);
        let s: f64 = tx.data().iter().map(|&v| v as f64).sum();
        let s = s as f32;
        finite_or_err("sum_all", &[s])?;
        let rg = self.requires(x);
        Ok(self.push(Tensor::scalar(s), Op::SumAll { x }, rg))
    }

    /// y = x ⊙ mask × factor with a constant mask. Gradients flow only
    /// through kept (nonzero-mask) entries.
    pub fn mul_mask_scaled(&mut self, x: TensorId, mask: &[f32], factor: f32) -> Result<TensorId> {
        let tx = self.value(x);
        if mask.len() != tx.numel() {
            return Err(Error::Contract {
                op: "mul_mask_scaled",
                msg: format!("mask length {} vs {} elements", mask.len(), tx.numel()),
            });
        }
        let out: Vec<f32> = tx.data().iter().zip(mask).map(|(&v, &m)| v * m * factor).collect();
        finite_or_err("mul_mask_scaled", &out)?;
        let shape = tx.shape().to_vec();
        let rg = self.requires(x);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::MulMaskScaled { x, mask: mask.to_vec(), factor },
            rg,
        ))
    }

    /// Mask a matrix and renormalise each row to sum 1. Rows whose masked sum
    /// falls below 1e-12 are restored to their unmasked input values.
    pub fn mask_renorm_rows(&mut self, x: TensorId, mask: &[f32]) -> Result<TensorId> {
        let tx = self.value(x);
        if !tx.is_matrix() {
            return Err(Error::Contract {
                op: "mask_renorm_rows",
                msg: format!("expected 2-D input, got shape {:?}", tx.shape()),
            });
        }
        if mask.len() != tx.numel() {
            return Err(Error::Contract {
                op: "mask_renorm_rows",
                msg: format!("mask length {} vs {} elements", mask.len(), tx.numel()),
            });
        }
        if tx.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Contract {
                op: "mask_renorm_rows",
                msg: "negative entries in input".into(),
            });
        }
        let (m, n) = (tx.rows(), tx.cols());
        let mut out = vec![0.0f32; m * n];
        let mut row_sum = vec![0.0f64; m];
        let mut fallback = vec![false; m];
        for i in 0..m {
            let mut s = 0.0f64;
            for j in 0..n {
                s += (tx.data()[i * n + j] * mask[i * n + j]) as f64;
            }
            row_sum[i] = s;
            if s < 1e-12 {
                fallback[i] = true;
                out[i * n..(i + 1) * n].copy_from_slice(&tx.data()[i * n..(i + 1) * n]);
            } else {
                for j in 0..n {
                    out[i * n + j] = ((tx.data()[i * n + j] * mask[i * n + j]) as f64 / s) as f32;
                }
            }
        }
        finite_or_err("mask_renorm_rows", &out)?;
        let rg = self.requires(x);
        Ok(self.push(
            Tensor { shape: vec![m, n], data: out },
            Op::MaskRenormRows { x, mask: mask.to_vec(), row_sum, fallback },
            rg,
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse accumulation from a scalar root. Gradient-requiring nodes not
    /// reachable from the root get zero gradients.
    pub fn backward(&self, root: TensorId) -> Result<Gradients> {
        let root_node = &self.nodes[root.0];
        if root_node.value.numel() != 1 {
            return Err(Error::Contract {
                op: "backward",
                msg: format!("root must be scalar, got shape {:?}", root_node.value.shape()),
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                out.push(None);
                continue;
            }
            let shape = node.value.shape().to_vec();
            let t = match grads[idx].take() {
                Some(data) => Tensor { shape, data },
                None => Tensor::zeros(shape),
            };
            out.push(Some(t));
        }
        Ok(Gradients { grads: out })
    }

    fn add_to(&self, grads: &mut [Option<Vec<f32>>], id: TensorId, contribution: &[f32]) {
        if !self.requires(id) {
            return;
        }
        let slot = &mut grads[id.0];
        match slot {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contribution) {
                    *a += c;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    fn accumulate(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}

            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.requires(*a) {
                    // dA = g · Bᵀ
                    let da = matmul_nt_f64acc(g, tb.data(), m, n, k);
                    self.add_to(grads, *a, &da);
                }
                if self.requires(*b) {
                    // dB = Aᵀ · g
                    let db = matmul_tn_f64acc(ta.data(), g, m, k, n);
                    self.add_to(grads, *b, &db);
                }
            }

            Op::MatMulNT { a, b } => {
                // C = A·Bᵀ with A: m×k, B: n×k, g: m×n.
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.requires(*a) {
                    // dA = g · B
                    let da = matmul_f64acc(g, tb.data(), m, n, k);
                    self.add_to(grads, *a, &da);
                }
                if self.requires(*b) {
                    // dB = gᵀ · A
                    let db = matmul_tn_f64acc(g, ta.data(), m, n, k);
                    self.add_to(grads, *b, &db);
                }
            }

            Op::Add { a, b } => {
                self.add_to(grads, *a, g);
                self.add_to(grads, *b, g);
            }

            Op::AddBias { x, bias } => {
                self.add_to(grads, *x, g);
                if self.requires(*bias) {
                    let tx = self.value(*x);
                    let (m, n) = (tx.rows(), tx.cols());
                    let mut db = vec![0.0f32; n];
                    for j in 0..n {
                        let mut acc = 0.0f64;
                        for i in 0..m {
                            acc += g[i * n + j] as f64;
                        }
                        db[j] = acc as f32;
                    }
                    self.add_to(grads, *bias, &db);
                }
            }

            Op::Sub { a, b } => {
                self.add_to(grads, *a, g);
                if self.requires(*b) {
                    let neg: Vec<f32> = g.iter().map(|&v| -v).collect();
                    self.add_to(grads, *b, &neg);
                }
            }

            Op::Mul { a, b } => {
                if self.requires(*a) {
                    let tb = self.value(*b);
                    let da: Vec<f32> = g.iter().zip(tb.data()).map(|(&gv, &bv)| gv * bv).collect();
                    self.add_to(grads, *a, &da);
                }
                if self.requires(*b) {
                    let ta = self.value(*a);
                    let db: Vec<f32> = g.iter().zip(ta.data()).map(|(&gv, &av)| gv * av).collect();
                    self.add_to(grads, *b, &db);
                }
            }

            Op::Relu { x } => {
                let tx = self.value(*x);
                let dx: Vec<f32> = g
                    .iter()
                    .zip(tx.data())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                self.add_to(grads, *x, &dx);
            }

            Op::SoftmaxRows { x } => {
                let ty = &self.nodes[idx].value;
                let (m, n) = (ty.rows(), ty.cols());
                let mut dx = vec![0.0f32; m * n];
                for i in 0..m {
                    let mut dot = 0.0f64;
                    for j in 0..n {
                        dot += g[i * n + j] as f64 * ty.data()[i * n + j] as f64;
                    }
                    for j in 0..n {
                        let y = ty.data()[i * n + j] as f64;
                        dx[i * n + j] = (y * (g[i * n + j] as f64 - dot)) as f32;
                    }
                }
                self.add_to(grads, *x, &dx);
            }

            Op::LayerNorm { x, gain, bias, eps } => {
                let tx = self.value(*x);
                let tg = self.value(*gain);
                let (m, d) = (tx.rows(), tx.cols());
                let mut dx = vec![0.0f32; m * d];
                let mut dgain = vec![0.0f64; d];
                let mut dbias = vec![0.0f64; d];
                for i in 0..m {
                    let row = &tx.data()[i * d..(i + 1) * d];
                    let grow = &g[i * d..(i + 1) * d];
                    let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                    let var: f64 =
                        row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + *eps as f64).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v as f64 - mean) * inv_std).collect();

                    let mut dxhat = vec![0.0f64; d];
                    for j in 0..d {
                        dgain[j] += grow[j] as f64 * xhat[j];
                        dbias[j] += grow[j] as f64;
                        dxhat[j] = grow[j] as f64 * tg.data()[j] as f64;
                    }
                    let dxhat_sum: f64 = dxhat.iter().sum();
                    let dxhat_dot: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        dx[i * d + j] =
                            (inv_std / df * (df * dxhat[j] - dxhat_sum - xhat[j] * dxhat_dot)) as f32;
                    }
                }
                self.add_to(grads, *x, &dx);
                if self.requires(*gain) {
                    let dg: Vec<f32> = dgain.iter().map(|&v| v as f32).collect();
                    self.add_to(grads, *gain, &dg);
                }
                if self.requires(*bias) {
                    let db: Vec<f32> = dbias.iter().map(|&v| v as f32).collect();
                    self.add_to(grads, *bias, &db);
                }
            }

            Op::CrossEntropy { logits, labels } => {
                let tl = self.value(*logits);
                let (m, c) = (tl.rows(), tl.cols());
                let scale = g[0] as f64 / m as f64;
                let mut dl = vec![0.0f32; m * c];
                for i in 0..m {
                    let row = &tl.data()[i * c..(i + 1) * c];
                    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let denom: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
                    for j in 0..c {
                        let p = ((row[j] - max) as f64).exp() / denom;
                        let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                        dl[i * c + j] = (scale * (p - onehot)) as f32;
                    }
                }
                self.add_to(grads, *logits, &dl);
            }

            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let count = self.value(p).numel();
                    self.add_to(grads, p, &g[offset..offset + count]);
                    offset += count;
                }
            }

            Op::ConcatCols { parts } => {
                let rows = self.value(parts[0]).rows();
                let total_cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.requires(p) {
                        let mut dp = vec![0.0f32; rows * c];
                        for i in 0..rows {
                            dp[i * c..(i + 1) * c].copy_from_slice(
                                &g[i * total_cols + offset..i * total_cols + offset + c],
                            );
                        }
                        self.add_to(grads, p, &dp);
                    }
                    offset += c;
                }
            }

            Op::EmbeddingLookup { table, ids } => {
                if self.requires(*table) {
                    let tt = self.value(*table);
                    let d = tt.cols();
                    let mut dt = vec![0.0f32; tt.numel()];
                    for (i, &id) in ids.iter().enumerate() {
                        let base = id as usize * d;
                        for j in 0..d {
                            dt[base + j] += g[i * d + j];
                        }
                    }
                    self.add_to(grads, *table, &dt);
                }
            }

            Op::MaxPoolRows { x, argmax } => {
                let tx = self.value(*x);
                let n = tx.cols();
                let mut dx = vec![0.0f32; tx.numel()];
                for (j, &i) in argmax.iter().enumerate() {
                    dx[i * n + j] += g[j];
                }
                self.add_to(grads, *x, &dx);
            }

            Op::MeanPoolRows { x, valid } => {
                let tx = self.value(*x);
                let n = tx.cols();
                let mut dx = vec![0.0f32; tx.numel()];
                let inv = 1.0 / *valid as f32;
                for i in 0..*valid {
                    for j in 0..n {
                        dx[i * n + j] = g[j] * inv;
                    }
                }
                self.add_to(grads, *x, &dx);
            }

            Op::TakeRow { x, index } => {
                let tx = self.value(*x);
                let n = tx.cols();
                let mut dx = vec![0.0f32; tx.numel()];
                dx[index * n..(index + 1) * n].copy_from_slice(g);
                self.add_to(grads, *x, &dx);
            }

            Op::Scale { x, factor } => {
                let dx: Vec<f32> = g.iter().map(|&v| v * factor).collect();
                self.add_to(grads, *x, &dx);
            }

            Op::SumAll { x } => {
                let tx = self.value(*x);
                let dx = vec![g[0]; tx.numel()];
                self.add_to(grads, *x, &dx);
            }

            Op::MulMaskScaled { x, mask, factor } => {
                let dx: Vec<f32> = g.iter().zip(mask).map(|(&gv, &m)| gv * m * factor).collect();
                self.add_to(grads, *x, &dx);
            }

            Op::MaskRenormRows { x, mask, row_sum, fallback } => {
                let ty = &self.nodes[idx].value;
                let (m, n) = (ty.rows(), ty.cols());
                let mut dx = vec![0.0f32; m * n];
                for i in 0..m {
                    if fallback[i] {
                        dx[i * n..(i + 1) * n].copy_from_slice(&g[i * n..(i + 1) * n]);
                        continue;
                    }
                    let s = row_sum[i];
                    let mut dot = 0.0f64;
                    for j in 0..n {
                        dot += g[i * n + j] as f64 * ty.data()[i * n + j] as f64;
                    }
                    for j in 0..n {
                        let mij = mask[i * n + j] as f64;
                        dx[i * n + j] = (mij * (g[i * n + j] as f64 - dot) / s) as f32;
                    }
                }
                self.add_to(grads, *x, &dx);
            }
        }
    }
}

/// Forward-order record of (parameter name, tape id) bindings made during one
/// forward pass. Gradient extraction and reduction follow this order.
#[derive(Default)]
pub struct ParamTrace {
    entries: Vec<(String, TensorId)>,
}

impl ParamTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, tape: &mut Tape, name: &str, value: &Tensor) -> TensorId {
        let id = tape.param(value);
        self.entries.push((name.to_string(), id));
        id
    }

    pub fn entries(&self) -> &[(String, TensorId)] {
        &self.entries
    }
}
