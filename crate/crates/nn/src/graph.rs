use std::collections::HashMap;

use rand::Rng;

use crate::error::{NnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::sigmoid;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which keys a query may attend to.
///
/// `key_valid[b * len_k + j]` marks key `j` of sequence `b` as attendable;
/// `causal` additionally restricts query `i` to keys `j <= i`. Query rows
/// with no admissible key produce a zero output.
#[derive(Debug, Clone, Default)]
pub struct AttentionMask {
    pub causal: bool,
    pub key_valid: Option<Vec<bool>>,
}

impl AttentionMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn causal() -> Self {
        Self { causal: true, key_valid: None }
    }

    fn allows(&self, b: usize, len_k: usize, i: usize, j: usize) -> bool {
        (!self.causal || j <= i) && self.key_valid.as_ref().map_or(true, |kv| kv[b * len_k + j])
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    Reshape(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    GatherRows { src: usize, rows: Vec<usize>, frozen: Option<usize> },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { src: usize, start: usize },
    Unfold { src: usize, group_len: usize, kernel: usize },
    MaxPool { src: usize, argmax: Vec<usize> },
    Dropout { src: usize, mask: Vec<f64> },
    Attention(Box<AttentionCache>),
    BceLogits { src: usize, targets: Vec<f64> },
    Bce { src: usize, targets: Vec<f64> },
    MaskedCe { src: usize, targets: Vec<usize>, valid: Vec<bool>, count: usize },
    Sum(usize),
    Mean(usize),
    SumSquares(usize),
}

#[derive(Debug)]
struct AttentionCache {
    q: usize,
    k: usize,
    v: usize,
    heads: usize,
    batch: usize,
    len_q: usize,
    len_k: usize,
    probs: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A tape of tensor operations. Build one per forward pass, then call
/// [`Graph::backward`] on a scalar output.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to `var`, if it was reached.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[var.0].clone(), g.clone()))
    }

    /// Adds parameter gradients into the store's `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                let p = store.get_mut(pid);
                if !p.trainable {
                    continue;
                }
                for (dst, src) in p.grad.data_mut().iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], idx: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[idx].requires_grad {
        return None;
    }
    let n = nodes[idx].value.numel();
    Some(grads[idx].get_or_insert_with(|| vec![0.0; n]))
}

fn check_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(NnError::ShapeMismatch { op, lhs: t.shape().to_vec(), rhs: vec![] });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `c = a * b + beta * c` for strided row-major operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        }
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: every operand is a live slice whose extent covers the strided
    // m x k, k x n and m x n views described by the arguments.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Scaled dot-product attention probabilities laid out as
/// `[batch][head][query][key]`.
fn attention_probs(
    q: &Tensor,
    k: &Tensor,
    heads: usize,
    batch: usize,
    mask: &AttentionMask,
) -> Result<(Vec<f64>, usize, usize)> {
    let (rq, d) = check_2d("attention", q)?;
    let (rk, dk) = check_2d("attention", k)?;
    if d != dk || batch == 0 || rq % batch != 0 || rk % batch != 0 {
        return Err(NnError::ShapeMismatch { op: "attention", lhs: q.shape().to_vec(), rhs: k.shape().to_vec() });
    }
    if heads == 0 || d % heads != 0 {
        return Err(NnError::DimNotDivisible { dim: d, heads });
    }
    let (len_q, len_k) = (rq / batch, rk / batch);
    if let Some(kv) = &mask.key_valid {
        if kv.len() != rk {
            return Err(NnError::ShapeMismatch { op: "attention mask", lhs: vec![kv.len()], rhs: vec![rk] });
        }
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd) = (q.data(), k.data());
    let mut probs = vec![0.0; batch * heads * len_q * len_k];
    let mut scores = vec![0.0; len_k];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..len_q {
                let qrow = &qd[(b * len_q + i) * d + h * dh..][..dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..len_k {
                    if !mask.allows(b, len_k, i, j) {
                        continue;
                    }
                    let krow = &kd[(b * len_k + j) * d + h * dh..][..dh];
                    let s = qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>() * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let base = ((b * heads + h) * len_q + i) * len_k;
                let mut total = 0.0;
                for j in 0..len_k {
                    if mask.allows(b, len_k, i, j) {
                        let e = (scores[j] - max).exp();
                        probs[base + j] = e;
                        total += e;
                    }
                }
                for p in &mut probs[base..base + len_k] {
                    *p /= total;
                }
            }
        }
    }
    Ok((probs, len_q, len_k))
}

/// Attention weights `softmax(q k^T / sqrt(d_head))` per head, returned as a
/// `[batch * heads * len_q, len_k]` matrix.
pub fn attention_weights(
    q: &Tensor,
    k: &Tensor,
    heads: usize,
    batch: usize,
    mask: &AttentionMask,
) -> Result<Tensor> {
    let (probs, len_q, len_k) = attention_probs(q, k, heads, batch, mask)?;
    Ok(Tensor::from_parts(vec![batch * heads * len_q, len_k], probs))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(NnError::NonFinite(op_name));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input (no gradient flows into the rest of the graph from it
    /// unless it is explicitly marked as a variable).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked, e.g. the input of a gradient check.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node { value: p.value.clone(), op: Op::Param, requires_grad: p.trainable });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = check_2d("matmul", ta)?;
        let (k2, n) = check_2d("matmul", tb)?;
        if k != k2 {
            return Err(NnError::ShapeMismatch { op: "matmul", lhs: ta.shape().to_vec(), rhs: tb.shape().to_vec() });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), &mut out, 0.0);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::ShapeMismatch { op, lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push("add", out, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", out, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", out, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    /// Adds a bias vector `[n]` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.cols();
        if tb.numel() != n {
            return Err(NnError::ShapeMismatch { op: "add_bias", lhs: tx.shape().to_vec(), rhs: tb.shape().to_vec() });
        }
        let b = tb.data();
        let data = tx.data().iter().enumerate().map(|(i, &v)| v + b[i % n]).collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push("add_bias", out, Op::AddBias(x.0, bias.0), &[x.0, bias.0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(x.0), &[x.0])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.map(x, |v| v * factor);
        self.push("scale", out, Op::Scale(x.0, factor), &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| v.max(0.0));
        self.push("relu", out, Op::Relu(x.0), &[x.0])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(x.0), &[x.0])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, f64::tanh);
        self.push("tanh", out, Op::Tanh(x.0), &[x.0])
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("softmax", out, Op::Softmax(x.0), &[x.0])
    }

    /// Per-row normalisation to zero mean and unit variance, then `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = tx.cols();
        if n == 0 || tg.numel() != n || tb.numel() != n {
            return Err(NnError::ShapeMismatch { op: "layer_norm", lhs: tx.shape().to_vec(), rhs: tg.shape().to_vec() });
        }
        let rows = tx.numel() / n;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = tg.data()[c] * h + tb.data()[c];
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std },
            &[x.0, gamma.0, beta.0],
        )
    }

    /// Selects rows of a matrix. Row `frozen`, if given, receives no gradient.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize], frozen: Option<usize>) -> Result<Var> {
        let t = self.value(src);
        let (r, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(NnError::IdOutOfRange { id: i, size: r });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_parts(vec![rows.len(), c], data);
        self.push("gather_rows", out, Op::GatherRows { src: src.0, rows: rows.to_vec(), frozen }, &[src.0])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(NnError::ShapeMismatch {
                op: "concat_cols",
                lhs: self.shape(parts[0]).to_vec(),
                rhs: parts.iter().map(|&p| self.value(p).rows()).collect(),
            });
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat_cols", Tensor::from_parts(vec![rows, total], data), Op::ConcatCols(ids.clone()), &ids)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(NnError::ShapeMismatch {
                op: "concat_rows",
                lhs: self.shape(parts[0]).to_vec(),
                rhs: parts.iter().map(|&p| self.value(p).cols()).collect(),
            });
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            rows += self.value(p).rows();
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat_rows", Tensor::from_parts(vec![rows, cols], data), Op::ConcatRows(ids.clone()), &ids)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, src: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(src);
        let (r, c) = (t.rows(), t.cols());
        if start > end || end > c {
            return Err(NnError::ShapeMismatch { op: "slice_cols", lhs: t.shape().to_vec(), rhs: vec![start, end] });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        self.push("slice_cols", Tensor::from_parts(vec![r, w], data), Op::SliceCols { src: src.0, start }, &[src.0])
    }

    /// Sliding windows of `kernel` consecutive rows within each group of
    /// `group_len` rows, flattened: `[G*L x C] -> [G*(L-k+1) x k*C]`.
    pub fn unfold(&mut self, src: Var, group_len: usize, kernel: usize) -> Result<Var> {
        let t = self.value(src);
        let (r, c) = (t.rows(), t.cols());
        if kernel == 0 || group_len == 0 || r % group_len != 0 {
            return Err(NnError::ShapeMismatch { op: "unfold", lhs: t.shape().to_vec(), rhs: vec![group_len, kernel] });
        }
        if group_len < kernel {
            return Err(NnError::InputTooShort { len: group_len, needed: kernel });
        }
        let groups = r / group_len;
        let out_len = group_len - kernel + 1;
        let mut data = Vec::with_capacity(groups * out_len * kernel * c);
        for g in 0..groups {
            for s in 0..out_len {
                let start = (g * group_len + s) * c;
                data.extend_from_slice(&t.data()[start..start + kernel * c]);
            }
        }
        let out = Tensor::from_parts(vec![groups * out_len, kernel * c], data);
        self.push("unfold", out, Op::Unfold { src: src.0, group_len, kernel }, &[src.0])
    }

    /// Non-overlapping max pooling over rows within groups of `group_len`
    /// rows. Trailing rows that do not fill a window are dropped. Ties route
    /// the gradient to the first maximal row.
    pub fn max_pool(&mut self, src: Var, group_len: usize, pool: usize) -> Result<Var> {
        let t = self.value(src);
        let (r, c) = (t.rows(), t.cols());
        if pool == 0 || group_len == 0 || r % group_len != 0 {
            return Err(NnError::ShapeMismatch { op: "max_pool", lhs: t.shape().to_vec(), rhs: vec![group_len, pool] });
        }
        if group_len < pool {
            return Err(NnError::InputTooShort { len: group_len, needed: pool });
        }
        let groups = r / group_len;
        let out_len = group_len / pool;
        let mut data = Vec::with_capacity(groups * out_len * c);
        let mut argmax = Vec::with_capacity(groups * out_len * c);
        for g in 0..groups {
            for w in 0..out_len {
                let first = g * group_len + w * pool;
                for col in 0..c {
                    let mut best = first * c + col;
                    for row in first + 1..first + pool {
                        let idx = row * c + col;
                        if t.data()[idx] > t.data()[best] {
                            best = idx;
                        }
                    }
                    data.push(t.data()[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::from_parts(vec![groups * out_len, c], data);
        self.push("max_pool", out, Op::MaxPool { src: src.0, argmax }, &[src.0])
    }

    /// Maximum over all rows of each group: `[G*L x C] -> [G x C]`.
    pub fn global_max_pool(&mut self, src: Var, group_len: usize) -> Result<Var> {
        self.max_pool(src, group_len, group_len)
    }

    /// Inverted dropout. Outside training, or with `rate == 0`, returns `x`
    /// itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::Domain(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("dropout", out, Op::Dropout { src: x.0, mask }, &[x.0])
    }

    /// Multi-head scaled dot-product attention without projections.
    ///
    /// `q` is `[batch*len_q x d]`, `k` and `v` are `[batch*len_k x d]`; the
    /// model dimension is split into `heads` contiguous column blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, batch: usize, mask: &AttentionMask) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tk.shape() != tv.shape() {
            return Err(NnError::ShapeMismatch { op: "attention", lhs: tk.shape().to_vec(), rhs: tv.shape().to_vec() });
        }
        let (probs, len_q, len_k) = attention_probs(tq, tk, heads, batch, mask)?;
        let d = tq.cols();
        let dh = d / heads;
        let vd = tv.data();
        let mut out = vec![0.0; batch * len_q * d];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..len_q {
                    let base = ((b * heads + h) * len_q + i) * len_k;
                    let orow = &mut out[(b * len_q + i) * d + h * dh..][..dh];
                    for j in 0..len_k {
                        let p = probs[base + j];
                        if p == 0.0 {
                            continue;
                        }
                        let vrow = &vd[(b * len_k + j) * d + h * dh..][..dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![batch * len_q, d], out);
        let cache = AttentionCache { q: q.0, k: k.0, v: v.0, heads, batch, len_q, len_k, probs };
        self.push("attention", out, Op::Attention(Box::new(cache)), &[q.0, k.0, v.0])
    }

    /// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets,
    /// computed stably from the logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if t.numel() != targets.len() || targets.is_empty() {
            return Err(NnError::ShapeMismatch { op: "bce_with_logits", lhs: t.shape().to_vec(), rhs: vec![targets.len()] });
        }
        let n = targets.len() as f64;
        let loss = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        self.push("bce_with_logits", Tensor::scalar(loss), Op::BceLogits { src: logits.0, targets: targets.to_vec() }, &[logits.0])
    }

    /// Mean binary cross-entropy of probabilities; every probability must lie in (0, 1).
    pub fn bce(&mut self, probs: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(probs);
        if t.numel() != targets.len() || targets.is_empty() {
            return Err(NnError::ShapeMismatch { op: "bce", lhs: t.shape().to_vec(), rhs: vec![targets.len()] });
        }
        let mut loss = 0.0;
        for (&p, &y) in t.data().iter().zip(targets) {
            loss += crate::bce_loss(p, y)?;
        }
        let loss = loss / targets.len() as f64;
        self.push("bce", Tensor::scalar(loss), Op::Bce { src: probs.0, targets: targets.to_vec() }, &[probs.0])
    }

    /// Token cross-entropy averaged over rows where `valid` is true.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], valid: &[bool]) -> Result<Var> {
        let t = self.value(logits);
        let (r, v) = (t.rows(), t.cols());
        if targets.len() != r || valid.len() != r {
            return Err(NnError::ShapeMismatch { op: "masked_cross_entropy", lhs: t.shape().to_vec(), rhs: vec![targets.len(), valid.len()] });
        }
        let count = valid.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(NnError::NoValidTargets);
        }
        let mut loss = 0.0;
        for i in 0..r {
            if !valid[i] {
                continue;
            }
            if targets[i] >= v {
                return Err(NnError::IdOutOfRange { id: targets[i], size: v });
            }
            let row = t.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[i]];
        }
        let loss = loss / count as f64;
        self.push(
            "masked_cross_entropy",
            Tensor::scalar(loss),
            Op::MaskedCe { src: logits.0, targets: targets.to_vec(), valid: valid.to_vec(), count },
            &[logits.0],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(NnError::Domain("mean of empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x.0), &[x.0])
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum_squares();
        self.push("sum_squares", Tensor::scalar(s), Op::SumSquares(x.0), &[x.0])
    }

    /// `lambda * sum(w^2)` over the store's trainable weight matrices.
    pub fn l2_penalty(&mut self, store: &ParamStore, lambda: f64) -> Result<Var> {
        let mut total: Option<Var> = None;
        for (id, p) in store.iter() {
            if !p.trainable || p.kind != crate::ParamKind::Weight {
                continue;
            }
            let w = self.param(store, id);
            let sq = self.sum_squares(w)?;
            total = Some(match total {
                Some(t) => self.add(t, sq)?,
                None => sq,
            });
        }
        match total {
            Some(t) => self.scale(t, lambda),
            None => Ok(self.constant(Tensor::scalar(0.0))),
        }
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(NnError::ShapeMismatch { op: "backward", lhs: self.shape(output).to_vec(), rhs: vec![] });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop(i, &g, &mut grads);
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite("backward"));
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes[..=output.0].iter().map(|n| n.value.shape().to_vec()).collect();
        let params = self.params.iter().filter(|(_, v)| v.0 <= output.0).map(|(&p, v)| (p, v.0)).collect();
        Ok(Gradients { grads, shapes, params })
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a].value, &nodes[b].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(ga) = acc(nodes, grads, a) {
                    gemm(m, n, k, g, (n, 1), tb.data(), (1, n), ga, 1.0);
                }
                if let Some(gb) = acc(nodes, grads, b) {
                    gemm(k, m, n, ta.data(), (1, k), g, (n, 1), gb, 1.0);
                }
            }
            &Op::Add(a, b) => {
                for idx in [a, b] {
                    if let Some(ga) = acc(nodes, grads, idx) {
                        ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = acc(nodes, grads, a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gb) = acc(nodes, grads, b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (nodes[a].value.data(), nodes[b].value.data());
                if let Some(ga) = acc(nodes, grads, a) {
                    for k in 0..g.len() {
                        ga[k] += g[k] * vb[k];
                    }
                }
                if let Some(gb) = acc(nodes, grads, b) {
                    for k in 0..g.len() {
                        gb[k] += g[k] * va[k];
                    }
                }
            }
            &Op::AddBias(x, b) => {
                if let Some(gx) = acc(nodes, grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gb) = acc(nodes, grads, b) {
                    let n = gb.len();
                    for (k, s) in g.iter().enumerate() {
                        gb[k % n] += s;
                    }
                }
            }
            &Op::Scale(x, f) => {
                if let Some(gx) = acc(nodes, grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s * f);
                }
            }
            &Op::Reshape(x) => {
                if let Some(gx) = acc(nodes, grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            &Op::Relu(x) => {
                let vx = nodes[x].value.data();
                if let Some(gx) = acc(nodes, grads, x) {
                    for k in 0..g.len() {
                        if vx[k] > 0.0 {
                            gx[k] += g[k];
                        }
                    }
                }
            }
            &Op::Sigmoid(x) => {
                let y = out.data();
                if let Some(gx) = acc(nodes, grads, x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                }
            }
            &Op::Tanh(x) => {
                let y = out.data();
                if let Some(gx) = acc(nodes, grads, x) {
                    for k in 0..g.len() {
                        gx[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                }
            }
            &Op::Softmax(x) => {
                let y = out.data();
                let n = out.cols().max(1);
                if let Some(gx) = acc(nodes, grads, x) {
                    for r in 0..y.len() / n {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            gx[r * n + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let n = out.cols();
                let gam = nodes[*gamma].value.data();
                if let Some(gg) = acc(nodes, grads, *gamma) {
                    for (k, s) in g.iter().enumerate() {
                        gg[k % n] += s * xhat[k];
                    }
                }
                if let Some(gb) = acc(nodes, grads, *beta) {
                    for (k, s) in g.iter().enumerate() {
                        gb[k % n] += s;
                    }
                }
                if let Some(gx) = acc(nodes, grads, *x) {
                    let nf = n as f64;
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let base = r * n;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..n {
                            let d = g[base + c] * gam[c];
                            sum_d += d;
                            sum_dx += d * xhat[base + c];
                        }
                        for c in 0..n {
                            let d = g[base + c] * gam[c];
                            gx[base + c] += inv / nf * (nf * d - sum_d - xhat[base + c] * sum_dx);
                        }
                    }
                }
            }
            Op::GatherRows { src, rows, frozen } => {
                let c = out.cols();
                if let Some(gs) = acc(nodes, grads, *src) {
                    for (k, &r) in rows.iter().enumerate() {
                        if Some(r) == *frozen {
                            continue;
                        }
                        for j in 0..c {
                            gs[r * c + j] += g[k * c + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p].value.cols();
                    if let Some(gp) = acc(nodes, grads, p) {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p].value.numel();
                    if let Some(gp) = acc(nodes, grads, p) {
                        gp.iter_mut().zip(&g[offset..offset + n]).for_each(|(d, s)| *d += s);
                    }
                    offset += n;
                }
            }
            &Op::SliceCols { src, start } => {
                let w = out.cols();
                let c = nodes[src].value.cols();
                if let Some(gs) = acc(nodes, grads, src) {
                    for r in 0..out.rows() {
                        for j in 0..w {
                            gs[r * c + start + j] += g[r * w + j];
                        }
                    }
                }
            }
            &Op::Unfold { src, group_len, kernel } => {
                let c = nodes[src].value.cols();
                let groups = nodes[src].value.rows() / group_len;
                let out_len = group_len - kernel + 1;
                let w = kernel * c;
                if let Some(gs) = acc(nodes, grads, src) {
                    for gi in 0..groups {
                        for s in 0..out_len {
                            let src_start = (gi * group_len + s) * c;
                            let row = (gi * out_len + s) * w;
                            for j in 0..w {
                                gs[src_start + j] += g[row + j];
                            }
                        }
                    }
                }
            }
            Op::MaxPool { src, argmax } => {
                if let Some(gs) = acc(nodes, grads, *src) {
                    for (k, &idx) in argmax.iter().enumerate() {
                        gs[idx] += g[k];
                    }
                }
            }
            Op::Dropout { src, mask } => {
                if let Some(gs) = acc(nodes, grads, *src) {
                    for k in 0..g.len() {
                        gs[k] += g[k] * mask[k];
                    }
                }
            }
            Op::Attention(cache) => self.attention_backward(cache, g, grads),
            Op::BceLogits { src, targets } => {
                let x = nodes[*src].value.data();
                let n = targets.len() as f64;
                if let Some(gs) = acc(nodes, grads, *src) {
                    for k in 0..targets.len() {
                        gs[k] += g[0] * (sigmoid(x[k]) - targets[k]) / n;
                    }
                }
            }
            Op::Bce { src, targets } => {
                let p = nodes[*src].value.data();
                let n = targets.len() as f64;
                if let Some(gs) = acc(nodes, grads, *src) {
                    for k in 0..targets.len() {
                        gs[k] += g[0] * (p[k] - targets[k]) / (p[k] * (1.0 - p[k])) / n;
                    }
                }
            }
            Op::MaskedCe { src, targets, valid, count } => {
                let t = &nodes[*src].value;
                let v = t.cols();
                let scale = g[0] / *count as f64;
                if let Some(gs) = acc(nodes, grads, *src) {
                    for r in 0..t.rows() {
                        if !valid[r] {
                            continue;
                        }
                        let row = t.row(r);
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let total: f64 = row.iter().map(|x| (x - max).exp()).sum();
                        for c in 0..v {
                            let p = (row[c] - max).exp() / total;
                            let y = if c == targets[r] { 1.0 } else { 0.0 };
                            gs[r * v + c] += scale * (p - y);
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = acc(nodes, grads, x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean(x) => {
                let n = nodes[x].value.numel() as f64;
                if let Some(gx) = acc(nodes, grads, x) {
                    gx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            &Op::SumSquares(x) => {
                let vx = nodes[x].value.data();
                if let Some(gx) = acc(nodes, grads, x) {
                    for k in 0..vx.len() {
                        gx[k] += 2.0 * vx[k] * g[0];
                    }
                }
            }
        }
    }

    fn attention_backward(&self, c: &AttentionCache, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (qd, kd, vd) = (self.nodes[c.q].value.data(), self.nodes[c.k].value.data(), self.nodes[c.v].value.data());
        let d = self.nodes[c.q].value.cols();
        let dh = d / c.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; c.len_k];
        for b in 0..c.batch {
            for h in 0..c.heads {
                for i in 0..c.len_q {
                    let base = ((b * c.heads + h) * c.len_q + i) * c.len_k;
                    let probs = &c.probs[base..base + c.len_k];
                    let qoff = (b * c.len_q + i) * d + h * dh;
                    let grow = &g[qoff..qoff + dh];
                    let mut dot = 0.0;
                    for j in 0..c.len_k {
                        if probs[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let koff = (b * c.len_k + j) * d + h * dh;
                        dp[j] = grow.iter().zip(&vd[koff..koff + dh]).map(|(x, y)| x * y).sum();
                        dot += probs[j] * dp[j];
                        for t in 0..dh {
                            dv[koff + t] += probs[j] * grow[t];
                        }
                    }
                    for j in 0..c.len_k {
                        let p = probs[j];
                        if p == 0.0 {
                            continue;
                        }
                        let ds = p * (dp[j] - dot) * scale;
                        let koff = (b * c.len_k + j) * d + h * dh;
                        for t in 0..dh {
                            dq[qoff + t] += ds * kd[koff + t];
                            dk[koff + t] += ds * qd[qoff + t];
                        }
                    }
                }
            }
        }
        for (idx, local) in [(c.q, dq), (c.k, dk), (c.v, dv)] {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let dst = grads[idx].get_or_insert_with(|| vec![0.0; local.len()]);
            dst.iter_mut().zip(&local).for_each(|(a, b)| *a += b);
        }
    }
}
